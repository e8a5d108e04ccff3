"""
Command suite: parse, synth, clean-labels, train, eval, gradcheck, inspect.

Every flag maps to one dotted config key (``FLAG_KEYS``); ``--set
key=value`` reaches any key. Paths live under ``io.*`` and per-command
switches under ``parse.*``, ``eval.*``, ``gradcheck.*`` and ``inspect.*``.
Precedence: flags, then ``--config`` file, then dataclass defaults.
Exit codes: 0 success, 1 runtime failure, 2 usage.
"""
import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from core.config import (
    build_section,
    check_known_keys,
    configure_logging,
    load_environment,
    parse_override,
    read_config_file,
    section_to_flat,
    write_config_file,
)
from core.checkpoint import load_checkpoint
from core.csi_ingest import IngestConfig, LinkLayout, ingest_captures, write_capture
from core.dataset import LABELS_FILE, SessionMeta, list_sessions, load_dataset, read_session, write_session
from core.errors import ConfigError, WiFlowError
from core.gradcheck_suite import per_layer, run_model_check, run_op_checks
from core.objectives import LossConfig
from core.pose_labels import detect_missing, interpolate_missing, load_labels, save_labels
from core.synth_data import SynthConfig, make_dataset, to_capture_records
from core.tensor_core import no_grad
from core.training_engine import (
    SplitResult,
    SplitSpec,
    TrainConfig,
    cross_validate_loso,
    evaluate_checkpoint,
    train,
)
from core.visualizations import create_csi_heatmap, create_pose_grid, save_figure
from core.wiflow_model import (
    REPORTED_MACS,
    REPORTED_PARAMS,
    WiFlowConfig,
    count_flops,
    expected_shape_trace,
    format_shape_trace,
    forward,
    init_model,
    predict,
)

logger = logging.getLogger(__name__)

TOLERANCE = {64: 1e-4, 32: 1e-2}


@dataclass
class PathOptions:
    """Files and directories an invocation reads or writes."""
    data: str = ''
    out: str = ''
    ckpt: str = ''
    inputs: List[str] = field(default_factory=list)
    labels: str = ''
    layout: str = ''
    split_file: str = ''

    def require(self, *names: str) -> None:
        for name in names:
            if not getattr(self, name):
                raise ConfigError(f'io.{name}', 'required (flag or config key)')


@dataclass
class ParseOptions:
    subject: str = 'S00'
    session: str = ''
    action: str = ''


@dataclass
class EvalOptions:
    which: str = 'test'
    plot: bool = False

    def validate(self) -> None:
        if self.which not in ('train', 'val', 'test'):
            raise ConfigError('eval.which', f"must be train, val or test, got {self.which!r}")


@dataclass
class GradcheckOptions:
    bits: int = 64
    seeds: int = 20
    max_entries: int = 6

    def validate(self) -> None:
        if self.bits not in TOLERANCE:
            raise ConfigError('gradcheck.bits', f'must be 32 or 64, got {self.bits}')
        if self.seeds < 1 or self.max_entries < 1:
            raise ConfigError('gradcheck.seeds', 'seeds and max_entries must be >= 1')


@dataclass
class InspectOptions:
    benchmark: int = 0

    def validate(self) -> None:
        if self.benchmark < 0:
            raise ConfigError('inspect.benchmark', 'must be >= 0')


SECTIONS = {
    'model': WiFlowConfig,
    'loss': LossConfig,
    'train': TrainConfig,
    'split': SplitSpec,
    'synth': SynthConfig,
    'data': IngestConfig,
    'io': PathOptions,
    'parse': ParseOptions,
    'eval': EvalOptions,
    'gradcheck': GradcheckOptions,
    'inspect': InspectOptions,
}

# argparse dest -> dotted key; every subcommand flag except --config/--set/--log-level is listed
FLAG_KEYS = {
    'data': 'io.data',
    'out': 'io.out',
    'ckpt': 'io.ckpt',
    'inputs': 'io.inputs',
    'labels': 'io.labels',
    'layout': 'io.layout',
    'split_file': 'io.split_file',
    'subject': 'parse.subject',
    'session': 'parse.session',
    'action': 'parse.action',
    'which': 'eval.which',
    'plot': 'eval.plot',
    'bits': 'gradcheck.bits',
    'seeds': 'gradcheck.seeds',
    'max_entries': 'gradcheck.max_entries',
    'benchmark': 'inspect.benchmark',
    'captures': 'synth.captures',
    'all_folds': 'split.all_folds',
    'epochs': 'train.epochs',
    'batch_size': 'train.batch_size',
    'lr': 'train.lr',
    'seed': 'train.seed',
    'max_steps': 'train.max_steps',
    'prefetch': 'train.prefetch',
    'mpjpe_scale': 'train.mpjpe_scale',
    'split': 'split.mode',
    'test_subject': 'split.test_subject',
    'window': 'data.window_T',
    'stride': 'data.stride',
    'clean': 'data.clean_labels',
    'lambda_bone': 'loss.lambda_bone',
    'subjects': 'synth.subjects',
    'sessions_per_subject': 'synth.sessions_per_subject',
    'ticks': 'synth.ticks',
    'synth_seed': 'synth.seed',
    'occlusion_rate': 'synth.occlusion_rate',
}

SPLIT_MODES = {'random': 'random_session', 'random_session': 'random_session', 'loso': 'loso'}


@dataclass
class RunConfig:
    """All sections of one invocation."""
    model: WiFlowConfig
    loss: LossConfig
    train: TrainConfig
    split: SplitSpec
    synth: SynthConfig
    data: IngestConfig
    io: PathOptions
    parse: ParseOptions
    eval: EvalOptions
    gradcheck: GradcheckOptions
    inspect: InspectOptions
    sources: List[str] = field(default_factory=list)

    def validate(self) -> None:
        if self.model.input_channels != self.data.channels:
            raise ConfigError('model.input_channels',
                              f'{self.model.input_channels} != data.channels {self.data.channels}')
        if self.model.window_T != self.data.window_T:
            raise ConfigError('model.window_T', f'{self.model.window_T} != data.window_T {self.data.window_T}')

    def to_flat(self) -> Dict[str, Any]:
        flat = {}
        for prefix in SECTIONS:
            flat.update(section_to_flat(getattr(self, prefix), prefix))
        return flat


def load_run_config(path=None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    flat = read_config_file(path) if path else {}
    flat.update(overrides or {})
    if 'split.mode' in flat:
        flat['split.mode'] = SPLIT_MODES.get(flat['split.mode'], flat['split.mode'])
    # data.window_T / data.channels follow the model unless set explicitly
    for model_key, data_key in (('model.window_T', 'data.window_T'), ('model.input_channels', 'data.channels')):
        if model_key in flat and data_key not in flat:
            flat[data_key] = flat[model_key]
        elif data_key in flat and model_key not in flat:
            flat[model_key] = flat[data_key]
    check_known_keys(flat, SECTIONS)
    run = RunConfig(**{prefix: build_section(cls, flat, prefix) for prefix, cls in SECTIONS.items()},
                    sources=[str(path)] if path else [])
    run.validate()
    return run


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    flat = {}
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            flat[key] = value
    for text in getattr(args, 'set', None) or []:
        key, value = parse_override(text)
        flat[key] = value
    return flat


def _run_config(args: argparse.Namespace) -> RunConfig:
    return load_run_config(getattr(args, 'config', None), _overrides(args))


def _print_json(doc: Dict[str, Any]) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True, default=str))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_parse(args: argparse.Namespace) -> int:
    run = _run_config(args)
    io = run.io
    io.require('inputs', 'out')
    layout = LinkLayout.from_json(io.layout) if io.layout else LinkLayout.default(receivers=len(io.inputs))
    if len(layout.receivers) != len(io.inputs):
        raise ConfigError('io.layout', f'layout names {len(layout.receivers)} receivers, got {len(io.inputs)} captures')
    matrix, report = ingest_captures(io.inputs, layout)
    for name in ('skipped', 'invalid', 'truncated', 'dropped_ticks'):
        if report[name]:
            logger.warning('parse %s=%d', name, report[name])
    session_id = run.parse.session or Path(io.out).name
    labels = None
    if io.labels:
        labels = load_labels(io.labels, run.parse.subject, session_id)
        if run.data.clean_labels:
            labels = interpolate_missing(labels)
    meta = SessionMeta(run.parse.subject, session_id, run.parse.action, run.data.csi_rate_hz, run.data.label_fps,
                       layout.channels, extra={'source': 'capture', 'captures': [str(p) for p in io.inputs]})
    write_session(io.out, matrix, labels, meta)
    logger.info('parse session=%s ticks=%d channels=%d', session_id, matrix.shape[1], matrix.shape[0])
    _print_json({'session': io.out, **report})
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    run = _run_config(args)
    run.io.require('out')
    cfg = run.synth
    written = make_dataset(cfg.subjects, cfg.sessions_per_subject, cfg, run.io.out)
    if cfg.captures:
        receivers = cfg.channels // (9 * 30)
        layout = LinkLayout.default(receivers=receivers)
        layout.check_complete(cfg.channels // 30)
        for directory in written:
            records = to_capture_records(read_session(directory).csi, layout)
            for receiver, stream in records.items():
                write_capture(directory / f'rx{receiver}.dat', stream)
    _print_json({'sessions': [str(p) for p in written]})
    return 0


def cmd_clean_labels(args: argparse.Namespace) -> int:
    io = _run_config(args).io
    if bool(io.data) == bool(io.labels):
        raise ConfigError('io.data', 'give either --data DIR or --in labels.csv')
    if io.data:
        targets = [(d / LABELS_FILE, d / LABELS_FILE, d.name) for d in list_sessions(io.data)]
    else:
        source = Path(io.labels)
        targets = [(source, Path(io.out) if io.out else source, source.parent.name)]
    total = 0
    for source, dest, session_id in targets:
        seq = load_labels(source, session_id=session_id)
        filled = int(detect_missing(seq).sum())
        save_labels(dest, interpolate_missing(seq))
        total += filled
    _print_json({'files': len(targets), 'interpolated': total})
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    run = _run_config(args)
    run.io.require('data', 'out')
    dataset = load_dataset(run.io.data, run.data)
    out = Path(run.io.out)
    out.mkdir(parents=True, exist_ok=True)
    echo = run.to_flat()
    if run.split.all_folds:
        write_config_file(out / 'config.json', echo)
        summary = cross_validate_loso(dataset, run.train, run.model, run.loss, out, seed=run.split.seed,
                                      config_echo=echo)
        print(summary.to_string(index=False))
        return 0
    state = train(dataset, run.split, run.train, run.model, run.loss, out, config_echo=echo)
    _print_json({'run_dir': str(out), 'epochs': state.epoch, 'steps': state.step,
                 'best_epoch': state.best_epoch, 'best_val_mpjpe': state.best_val})
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    run = _run_config(args)
    io, which = run.io, run.eval.which
    io.require('ckpt', 'data')
    store, meta = load_checkpoint(io.ckpt)
    run.data.window_T = store.config.window_T
    run.data.channels = store.config.input_channels
    dataset = load_dataset(io.data, run.data)
    split = SplitResult.from_json(io.split_file) if io.split_file else None
    out = Path(io.out) if io.out else Path(io.ckpt).parent
    report, groups = evaluate_checkpoint(io.ckpt, dataset, split, which, loss_config=run.loss,
                                         unit_scale=run.train.mpjpe_scale, out_dir=out)
    if run.eval.plot:
        indices = dataset.indices_for(getattr(split, which)) if split else np.arange(len(dataset))
        shown = indices[:6]
        pred = predict(store, dataset.windows[shown])
        save_figure(create_pose_grid(pred, dataset.poses[shown]), out / 'poses.html')
        heatmap = create_csi_heatmap(dataset.windows[shown[0]], f'CSI window {int(shown[0])}')
        save_figure(heatmap, out / 'csi_window.html')
    _print_json({'checkpoint_epoch': meta.get('epoch'), 'windows': report.sample_count, **report.as_row()})
    print(groups.to_string(index=False))
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    opts = _run_config(args).gradcheck
    started = time.perf_counter()
    ops = run_op_checks(range(opts.seeds), opts.bits)
    model = run_model_check(bits=opts.bits, max_entries=opts.max_entries)
    layers = per_layer(model)
    print(ops.to_string(index=False))
    print()
    print(layers.to_string(index=False))
    worst = max(float(ops['max_rel_error'].max()), float(layers['max_rel_error'].max()))
    tolerance = TOLERANCE[opts.bits]
    print(f'\nmax relative error {worst:.3e} (tolerance {tolerance:.0e})')
    logger.info('gradcheck bits=%d worst=%.3e elapsed=%.3fs', opts.bits, worst, time.perf_counter() - started)
    if worst >= tolerance:
        logger.error('gradcheck failed: %.3e >= %.0e', worst, tolerance)
        return 1
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    run = _run_config(args)
    config = run.model
    store = init_model(config, run.train.seed)
    window = np.zeros((config.input_channels, config.window_T), dtype=np.float32)
    trace: list = []
    with no_grad():
        forward(window, store, 'eval', trace)
    print(format_shape_trace(trace))
    if trace != expected_shape_trace(config):
        logger.error('inspect shape trace differs from the configured layout')
        return 1
    params, macs = store.count(), count_flops(config)
    print(f'\nparameters {params:,} (reported {REPORTED_PARAMS / 1e6:.2f}M, ratio {params / REPORTED_PARAMS:.3f})')
    print(f'MACs/window {macs:,} (reported {REPORTED_MACS / 1e9:.2f}B, ratio {macs / REPORTED_MACS:.3f})')
    repeats = run.inspect.benchmark
    if repeats:
        with no_grad():
            started = time.perf_counter()
            for _ in range(repeats):
                forward(window, store, 'eval')
            elapsed = time.perf_counter() - started
        print(f'latency {1000 * elapsed / repeats:.2f} ms/window, {repeats / elapsed:.1f} windows/s')
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--log-level', default=None, help='DEBUG, INFO, WARNING, ERROR')
    parser.add_argument('--config', default=None, help='JSON config with dotted keys')
    parser.add_argument('--set', action='append', metavar='KEY=VALUE', help='override any config key')


def _switch(parser: argparse.ArgumentParser, flag: str, help_text: Optional[str] = None) -> None:
    # None when absent so a config file value is not overridden
    parser.add_argument(flag, action='store_true', default=None, help=help_text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='wiflow', description='WiFi CSI pose estimation pipeline')
    sub = parser.add_subparsers(dest='command', metavar='COMMAND')

    p = sub.add_parser('parse', help='fuse per-receiver capture files into a session directory')
    _common(p)
    p.add_argument('--in', dest='inputs', action='append', help='capture file, one per receiver')
    p.add_argument('--layout', help='link layout JSON')
    p.add_argument('--out', help='session directory to write')
    p.add_argument('--labels', help='labels.csv to store with the session')
    p.add_argument('--subject')
    p.add_argument('--session')
    p.add_argument('--action')
    _switch(p, '--clean', 'interpolate missing keypoints before writing')
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser('synth', help='write a synthetic portable dataset')
    _common(p)
    p.add_argument('--out')
    p.add_argument('--subjects', type=int)
    p.add_argument('--sessions-per-subject', type=int)
    p.add_argument('--ticks', type=int)
    p.add_argument('--seed', dest='synth_seed', type=int)
    p.add_argument('--occlusion-rate', type=float)
    _switch(p, '--captures', 'also write rx<N>.dat capture files')
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser('clean-labels', help='interpolate missing keypoints')
    _common(p)
    p.add_argument('--data', help='dataset root, cleaned in place')
    p.add_argument('--in', dest='labels', help='single labels.csv')
    p.add_argument('--out', help='output for --in (default: overwrite)')
    p.set_defaults(func=cmd_clean_labels)

    p = sub.add_parser('train', help='train and evaluate a model')
    _common(p)
    p.add_argument('--data')
    p.add_argument('--out')
    p.add_argument('--split', choices=sorted(SPLIT_MODES))
    p.add_argument('--test-subject')
    _switch(p, '--all-folds', 'leave-one-subject-out over every subject')
    p.add_argument('--epochs', type=int)
    p.add_argument('--batch-size', type=int)
    p.add_argument('--lr', type=float)
    p.add_argument('--seed', type=int)
    p.add_argument('--max-steps', type=int)
    p.add_argument('--prefetch', type=int)
    p.add_argument('--mpjpe-scale', type=float)
    p.add_argument('--lambda-bone', type=float)
    p.add_argument('--window', type=int)
    p.add_argument('--stride', type=int)
    _switch(p, '--clean')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('eval', help='evaluate a checkpoint')
    _common(p)
    p.add_argument('--ckpt')
    p.add_argument('--data')
    p.add_argument('--split-file')
    p.add_argument('--which', choices=('train', 'val', 'test'))
    p.add_argument('--out')
    _switch(p, '--plot')
    p.add_argument('--mpjpe-scale', type=float)
    p.add_argument('--stride', type=int)
    _switch(p, '--clean')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('gradcheck', help='finite-difference gradient checks')
    _common(p)
    p.add_argument('--bits', type=int, help='64 (default) or 32')
    p.add_argument('--seeds', type=int, help='random inputs per op (default 20)')
    p.add_argument('--max-entries', type=int, help='entries checked per parameter (default 6)')
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser('inspect', help='shape trace, parameter and MAC counts')
    _common(p)
    p.add_argument('--benchmark', type=int, metavar='N', help='time N eval forwards')
    p.set_defaults(func=cmd_inspect)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    load_environment()
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        configure_logging(args.log_level)
        return args.func(args)
    except WiFlowError as exc:
        logger.error('%s failed: %s', args.command, exc)
        return 1
    except FileNotFoundError as exc:
        logger.error('%s failed: %s', args.command, exc)
        return 1
    except Exception:
        logger.exception('%s crashed', args.command)
        return 1


def main() -> None:
    sys.exit(run())
