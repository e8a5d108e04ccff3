"""
Training and evaluation harness.

Session-level splits (random 70/15/15 or leave-one-subject-out), AdamW with
decoupled weight decay, reduce-on-plateau scheduling on validation MPJPE,
the epoch loop with checkpoints and a metrics.csv history, and evaluation
with per-action / per-subject breakdowns.

A run directory holds::

    config.json  split.json  metrics.csv  best.ckpt  last.ckpt  summary.json  curves.html
"""
import json
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core.checkpoint import load_checkpoint, save_checkpoint
from core.dataset import PoseDataset
from core.errors import ConfigError, MissingKeypointError, SplitError, TrainingDivergedError
from core.objectives import (
    PCK_ALPHAS,
    LossConfig,
    MetricReport,
    joint_errors,
    loss_breakdown,
    metric_report,
    pck_label,
)
from core.pose_labels import DEFAULT_TOPOLOGY, KEYPOINT_NAMES, SkeletonTopology, reference_scale
from core.tensor_core import Tensor, backward, no_grad
from core.visualizations import create_training_curves, save_figure
from core.wiflow_model import ParameterStore, WiFlowConfig, forward, init_model, predict

logger = logging.getLogger(__name__)

METRIC_COLUMNS = (['epoch', 'split', 'loss_total', 'loss_h', 'loss_b']
                  + [pck_label(a) for a in PCK_ALPHAS] + ['mpjpe', 'lr'])


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 5e-5
    lr_factor: float = 0.5
    patience: int = 3
    min_lr: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    max_steps: int = 0
    prefetch: int = 0
    mpjpe_scale: float = 1.0
    eval_train: bool = True
    write_plots: bool = True

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError('train.epochs', 'must be >= 0')
        if self.batch_size < 1:
            raise ConfigError('train.batch_size', 'must be >= 1')
        for name in ('lr', 'min_lr', 'adam_eps', 'mpjpe_scale'):
            if getattr(self, name) <= 0:
                raise ConfigError(f'train.{name}', 'must be positive')
        if self.weight_decay < 0:
            raise ConfigError('train.weight_decay', 'must be >= 0')
        if not 0 < self.lr_factor < 1:
            raise ConfigError('train.lr_factor', 'must lie in (0, 1)')
        if self.patience < 1:
            raise ConfigError('train.patience', 'must be >= 1')
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError('train.beta1', 'Adam betas must lie in [0, 1)')
        if self.max_steps < 0 or self.prefetch < 0:
            raise ConfigError('train.max_steps', 'max_steps and prefetch must be >= 0')


@dataclass
class SplitSpec:
    mode: str = 'random_session'
    ratios: List[float] = field(default_factory=lambda: [0.70, 0.15, 0.15])
    test_subject: str = ''
    pool_ratio: List[float] = field(default_factory=lambda: [0.90, 0.10])
    seed: int = 0
    all_folds: bool = False  # one loso fold per subject

    def validate(self) -> None:
        if self.mode not in ('random_session', 'loso'):
            raise ConfigError('split.mode', f"must be 'random_session' or 'loso', got {self.mode!r}")
        for name, values, size in (('ratios', self.ratios, 3), ('pool_ratio', self.pool_ratio, 2)):
            if len(values) != size or any(v < 0 for v in values) or abs(sum(values) - 1.0) > 1e-9:
                raise ConfigError(f'split.{name}', f'needs {size} non-negative values summing to 1, got {values}')
        if self.mode == 'loso' and not self.test_subject and not self.all_folds:
            raise ConfigError('split.test_subject', 'required for loso splits')


@dataclass
class SplitResult:
    """Session ids per set: the split manifest written as split.json."""
    train: List[str]
    val: List[str]
    test: List[str]
    mode: str = 'random_session'
    test_subject: str = ''
    seed: int = 0

    def check_partition(self, sessions: Sequence[str]) -> None:
        sets = [set(self.train), set(self.val), set(self.test)]
        if sum(len(s) for s in sets) != len(set().union(*sets)):
            raise SplitError('split sets overlap')
        if set().union(*sets) != set(sessions):
            raise SplitError('split sets do not cover the sessions exactly')

    def to_json(self, path) -> None:
        doc = {'mode': self.mode, 'test_subject': self.test_subject, 'seed': self.seed,
               'train': self.train, 'val': self.val, 'test': self.test}
        Path(path).write_text(json.dumps(doc, indent=2) + '\n', encoding='utf-8')

    @classmethod
    def from_json(cls, path) -> 'SplitResult':
        doc = json.loads(Path(path).read_text(encoding='utf-8'))
        return cls(list(doc['train']), list(doc['val']), list(doc['test']),
                   doc.get('mode', 'random_session'), doc.get('test_subject', ''), doc.get('seed', 0))


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

def _largest_remainder(n: int, ratios: Sequence[float]) -> List[int]:
    """Integer counts summing to ``n``; ties in the remainder go to the earlier set."""
    exact = [n * r for r in ratios]
    counts = [int(np.floor(e + 1e-9)) for e in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:n - sum(counts)]:
        counts[i] += 1
    return counts


def _ensure_nonempty(counts: List[int], ratios: Sequence[float]) -> List[int]:
    for i, r in enumerate(ratios):
        if r > 0 and counts[i] == 0:
            donor = max(range(len(counts)), key=lambda j: counts[j])
            if counts[donor] > 1:
                counts[donor] -= 1
                counts[i] += 1
    return counts


def split_random_session(sessions: Sequence[str], ratios: Sequence[float] = (0.70, 0.15, 0.15),
                         seed: int = 0) -> SplitResult:
    """Shuffle whole sessions and cut them into train / val / test."""
    sessions = sorted(set(sessions))
    if len(sessions) < 3:
        raise SplitError(f'random session split needs at least 3 sessions, got {len(sessions)}')
    order = [sessions[i] for i in np.random.default_rng(seed).permutation(len(sessions))]
    n_train, n_val, _ = _ensure_nonempty(_largest_remainder(len(order), ratios), ratios)
    result = SplitResult(order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:],
                         'random_session', '', seed)
    result.check_partition(sessions)
    return result


def split_loso(sessions: Mapping[str, str], test_subject: str, seed: int = 0,
               pool_ratio: Sequence[float] = (0.90, 0.10)) -> SplitResult:
    """All sessions of ``test_subject`` form the test set; the rest split 90/10 by session."""
    subjects = set(sessions.values())
    if test_subject not in subjects:
        raise SplitError(f'unknown test subject {test_subject!r}; known: {sorted(subjects)}')
    test = sorted(s for s, subj in sessions.items() if subj == test_subject)
    pool = sorted(s for s, subj in sessions.items() if subj != test_subject)
    if len(pool) < 2:
        raise SplitError(f'leave-one-subject-out needs at least 2 sessions outside {test_subject!r}')
    order = [pool[i] for i in np.random.default_rng(seed).permutation(len(pool))]
    n_train, _ = _ensure_nonempty(_largest_remainder(len(order), pool_ratio), pool_ratio)
    result = SplitResult(order[:n_train], order[n_train:], test, 'loso', test_subject, seed)
    result.check_partition(list(sessions))
    return result


def resolve_split(dataset: PoseDataset, spec: SplitSpec) -> SplitResult:
    sessions = dataset.sessions()
    if spec.mode == 'loso':
        return split_loso(sessions, spec.test_subject, spec.seed, spec.pool_ratio)
    return split_random_session(list(sessions), spec.ratios, spec.seed)


# ---------------------------------------------------------------------------
# Optimizer and scheduler
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0


def adamw_step(params: Mapping[str, Tensor], state: OptimizerState, lr: float, weight_decay: float,
               grads: Optional[Mapping[str, np.ndarray]] = None) -> bool:
    """One AdamW update in place. Returns False when a non-finite gradient skipped the step.

    Gradients default to each tensor's ``grad`` (absent means zero).
    """
    if grads is None:
        grads = {name: t.grad for name, t in params.items()}
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            state.skipped += 1
            logger.warning('adamw skipped_step=%d param=%s non_finite_grad', state.skipped, name)
            return False

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, tensor in params.items():
        p = tensor.data.astype(np.float64)
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        p *= 1.0 - lr * weight_decay
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        tensor.data[...] = p.astype(tensor.dtype)
    return True


@dataclass
class PlateauScheduler:
    lr: float
    factor: float = 0.5
    patience: int = 3
    min_lr: float = 1e-7
    best: float = float('inf')
    bad_epochs: int = 0
    reductions: int = 0


def plateau_scheduler_step(state: PlateauScheduler, monitored: float) -> float:
    """Count epochs without a strictly lower value; reduce the lr when the count reaches patience."""
    if monitored < state.best:
        state.best = monitored
        state.bad_epochs = 0
        return state.lr
    state.bad_epochs += 1
    if state.bad_epochs >= state.patience:
        reduced = max(state.lr * state.factor, state.min_lr)
        if reduced < state.lr:
            state.reductions += 1
            logger.info('scheduler lr=%.3e -> %.3e after %d bad epochs', state.lr, reduced, state.bad_epochs)
        state.lr = reduced
        state.bad_epochs = 0
    return state.lr


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

@dataclass
class TrainRunState:
    store: ParameterStore
    optimizer: OptimizerState
    scheduler: PlateauScheduler
    split: SplitResult
    epoch: int = 0
    step: int = 0
    best_val: float = float('inf')
    best_epoch: int = 0
    best_store: Optional[ParameterStore] = None  # frozen copy at best_epoch
    history: List[Dict[str, Any]] = field(default_factory=list)
    out_dir: Optional[Path] = None

    def metrics_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=METRIC_COLUMNS)


def iterate_batches(dataset: PoseDataset, indices: np.ndarray, batch_size: int,
                    rng: np.random.Generator, prefetch: int = 0) -> Iterator[Tuple[int, np.ndarray, np.ndarray, np.ndarray]]:
    """Shuffled mini-batches ``(batch_id, indices, windows, poses)``.

    With ``prefetch`` > 0 the arrays are gathered on a producer thread through
    a bounded queue; the batch order is the same as without it.
    """
    order = indices[rng.permutation(len(indices))]
    chunks = [order[s:s + batch_size] for s in range(0, len(order), batch_size)]

    def gather(batch_id):
        idx = chunks[batch_id]
        return batch_id, idx, dataset.windows[idx], dataset.poses[idx]

    if prefetch <= 0:
        for batch_id in range(len(chunks)):
            yield gather(batch_id)
        return

    slots: queue.Queue = queue.Queue(maxsize=prefetch)
    stop = threading.Event()

    def produce():
        for batch_id in range(len(chunks)):
            if stop.is_set():
                return
            slots.put(gather(batch_id))
        slots.put(None)

    worker = threading.Thread(target=produce, name='batch-prefetch', daemon=True)
    worker.start()
    try:
        while True:
            item = slots.get()
            if item is None:
                break
            yield item
    finally:
        stop.set()
        while worker.is_alive():
            try:
                slots.get_nowait()
            except queue.Empty:
                worker.join(timeout=0.01)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _require_clean(dataset: PoseDataset, indices: np.ndarray) -> None:
    missing = dataset.missing[indices]
    if missing.any():
        row, joint = np.argwhere(missing)[0]
        raise MissingKeypointError(KEYPOINT_NAMES[joint], str(dataset.session_ids[indices[row]]),
                                   'missing in labels; run clean-labels first')


def evaluate(store: ParameterStore, dataset: PoseDataset, indices: Optional[np.ndarray] = None,
             topo: SkeletonTopology = DEFAULT_TOPOLOGY, loss_config: Optional[LossConfig] = None,
             unit_scale: float = 1.0, batch_size: int = 64) -> Tuple[MetricReport, Dict[str, float], np.ndarray]:
    """Eval-mode metrics and loss components over ``indices`` (all windows by default).

    Returns the report, the loss components and the predictions.
    """
    indices = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    _require_clean(dataset, indices)
    started = time.perf_counter()
    pred = predict(store, dataset.windows[indices], batch_size)
    gt = dataset.poses[indices]
    report = metric_report(pred, gt, topo, unit_scale)
    losses = {'loss_total': float('nan'), 'loss_h': float('nan'), 'loss_b': float('nan')}
    if len(indices):
        with no_grad():
            total, l_h, l_b = loss_breakdown(Tensor(pred, dtype=np.float64), gt.astype(np.float64),
                                             topo, loss_config)
        losses = {'loss_total': total.item(), 'loss_h': l_h, 'loss_b': l_b}
    logger.debug('evaluate windows=%d mpjpe=%.6f elapsed=%.3fs', len(indices), report.mpjpe,
                 time.perf_counter() - started)
    return report, losses, pred


def group_metrics(pred: np.ndarray, dataset: PoseDataset, indices: np.ndarray,
                  topo: SkeletonTopology = DEFAULT_TOPOLOGY, unit_scale: float = 1.0) -> pd.DataFrame:
    """PCK and MPJPE per action and per subject."""
    gt = dataset.poses[indices].astype(np.float64)
    errors = joint_errors(pred, gt)
    scales = np.asarray(reference_scale(gt, topo)).reshape(-1, 1)
    frame = pd.DataFrame({
        'action': dataset.actions[indices].astype(str),
        'subject': dataset.subject_ids[indices].astype(str),
        'mpjpe': errors.mean(axis=1) * unit_scale,
    })
    for alpha in PCK_ALPHAS:
        frame[pck_label(alpha)] = (errors / scales <= alpha).mean(axis=1)
    value_cols = [pck_label(a) for a in PCK_ALPHAS] + ['mpjpe']
    parts = []
    for key in ('action', 'subject'):
        grouped = frame.groupby(key)[value_cols].mean()
        grouped.insert(0, 'windows', frame.groupby(key).size())
        grouped = grouped.reset_index().rename(columns={key: 'group'})
        grouped.insert(0, 'group_by', key)
        parts.append(grouped)
    return pd.concat(parts, ignore_index=True)


def _metric_row(epoch: int, split: str, report: MetricReport, losses: Mapping[str, float], lr: float) -> Dict[str, Any]:
    row = {'epoch': epoch, 'split': split, **losses}
    row.update(report.as_row())
    row['lr'] = lr
    return row


def evaluate_checkpoint(path, dataset: PoseDataset, split: Optional[SplitResult] = None, which: str = 'test',
                        topo: SkeletonTopology = DEFAULT_TOPOLOGY, loss_config: Optional[LossConfig] = None,
                        unit_scale: float = 1.0, out_dir=None) -> Tuple[MetricReport, pd.DataFrame]:
    """Evaluate a saved checkpoint on one set of a split manifest (every window without one)."""
    store, meta = load_checkpoint(path)
    if split is None:
        indices = np.arange(len(dataset))
    else:
        sessions = getattr(split, which)
        indices = dataset.indices_for(sessions)
    if not len(indices):
        raise SplitError(f'evaluation set {which!r} holds no windows')
    report, losses, pred = evaluate(store, dataset, indices, topo, loss_config, unit_scale)
    groups = group_metrics(pred, dataset, indices, topo, unit_scale)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        row = _metric_row(int(meta.get('epoch', 0)), which, report, losses, float('nan'))
        pd.DataFrame([row], columns=METRIC_COLUMNS).to_csv(out_dir / 'eval_metrics.csv', index=False)
        groups.to_csv(out_dir / 'eval_by_group.csv', index=False)
    logger.info('eval ckpt=%s split=%s windows=%d pck20=%.4f mpjpe=%.6f', path, which, report.sample_count,
                report.pck.get(0.2, float('nan')), report.mpjpe)
    return report, groups


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _dump_batch(out_dir: Optional[Path], epoch: int, batch_id: int, idx: np.ndarray,
                dataset: PoseDataset, loss: float) -> Optional[str]:
    if out_dir is None:
        return None
    path = out_dir / 'diverged_batch.json'
    doc = {
        'epoch': epoch, 'batch_id': batch_id, 'loss': repr(loss),
        'indices': [int(i) for i in idx],
        'session_ids': [str(s) for s in dataset.session_ids[idx]],
        'start_ticks': [int(t) for t in dataset.start_ticks[idx]],
    }
    path.write_text(json.dumps(doc, indent=2) + '\n', encoding='utf-8')
    return str(path)


def _evaluate_epoch(state: TrainRunState, dataset: PoseDataset, sets: Mapping[str, np.ndarray],
                    config: TrainConfig, topo: SkeletonTopology, loss_config: LossConfig) -> Dict[str, MetricReport]:
    reports = {}
    for name, indices in sets.items():
        report, losses, _ = evaluate(state.store, dataset, indices, topo, loss_config,
                                     config.mpjpe_scale, config.batch_size)
        state.history.append(_metric_row(state.epoch, name, report, losses, state.scheduler.lr))
        reports[name] = report
    return reports


def train(dataset: PoseDataset, split, config: Optional[TrainConfig] = None,
          model_config: Optional[WiFlowConfig] = None, loss_config: Optional[LossConfig] = None,
          out_dir=None, topo: SkeletonTopology = DEFAULT_TOPOLOGY,
          config_echo: Optional[Dict[str, Any]] = None) -> TrainRunState:
    """Train on the split's train sessions, monitor validation MPJPE, keep the best checkpoint.

    ``split`` is a SplitSpec (resolved here) or a ready SplitResult.
    ``epochs=0`` runs the baseline evaluation only.
    """
    config = config or TrainConfig()
    config.validate()
    loss_config = loss_config or LossConfig()
    split = resolve_split(dataset, split) if isinstance(split, SplitSpec) else split
    split.check_partition(list(dataset.sessions()))
    train_idx = dataset.indices_for(split.train)
    val_idx = dataset.indices_for(split.val)
    test_idx = dataset.indices_for(split.test)
    if not len(train_idx) or not len(val_idx):
        raise SplitError(f'empty split: train={len(train_idx)} val={len(val_idx)} windows')
    _require_clean(dataset, np.concatenate([train_idx, val_idx, test_idx]))

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if config_echo is not None:
            (out / 'config.json').write_text(json.dumps(config_echo, indent=2, sort_keys=True) + '\n',
                                             encoding='utf-8')
        split.to_json(out / 'split.json')

    store = init_model(model_config, config.seed)
    state = TrainRunState(
        store=store,
        optimizer=OptimizerState(beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps),
        scheduler=PlateauScheduler(config.lr, config.lr_factor, config.patience, config.min_lr),
        split=split,
        out_dir=out,
    )
    monitored = {'train': train_idx, 'val': val_idx} if config.eval_train else {'val': val_idx}
    logger.info('train windows=%d/%d/%d params=%d dataset=%s', len(train_idx), len(val_idx), len(test_idx),
                store.count(), dataset.content_hash())

    reports = _evaluate_epoch(state, dataset, monitored, config, topo, loss_config)
    state.best_val = reports['val'].mpjpe
    state.best_store = store.frozen()
    meta = {'epoch': 0, 'val_mpjpe': state.best_val, 'dataset': dataset.content_hash()}
    if out is not None:
        save_checkpoint(out / 'best.ckpt', store, meta)

    rng = np.random.default_rng(config.seed)
    done = False
    for epoch in range(1, config.epochs + 1):
        state.epoch = epoch
        started = time.perf_counter()
        for batch_id, idx, windows, poses in iterate_batches(dataset, train_idx, config.batch_size, rng,
                                                              config.prefetch):
            pred = forward(windows, store, 'train')
            loss, l_h, l_b = loss_breakdown(pred, poses, topo, loss_config)
            value = loss.item()
            if not np.isfinite(value):
                dump = _dump_batch(out, epoch, batch_id, idx, dataset, value)
                raise TrainingDivergedError(epoch, batch_id, dump)
            backward(loss)
            adamw_step(store.params, state.optimizer, state.scheduler.lr, config.weight_decay)
            store.zero_grad()
            state.step += 1
            logger.debug('step=%d epoch=%d batch=%d loss=%.6f loss_h=%.6f loss_b=%.6f',
                         state.step, epoch, batch_id, value, l_h, l_b)
            if config.max_steps and state.step >= config.max_steps:
                done = True
                break

        reports = _evaluate_epoch(state, dataset, monitored, config, topo, loss_config)
        val_mpjpe = reports['val'].mpjpe
        lr_used = state.scheduler.lr
        plateau_scheduler_step(state.scheduler, val_mpjpe)
        if val_mpjpe < state.best_val:
            state.best_val, state.best_epoch = val_mpjpe, epoch
            state.best_store = store.frozen()
            if out is not None:
                save_checkpoint(out / 'best.ckpt', store,
                                {'epoch': epoch, 'val_mpjpe': val_mpjpe, 'dataset': dataset.content_hash()})
        logger.info('train epoch=%d steps=%d val_mpjpe=%.6f val_pck20=%.4f lr=%.3e elapsed=%.3fs',
                    epoch, state.step, val_mpjpe, reports['val'].pck.get(0.2, float('nan')), lr_used,
                    time.perf_counter() - started)
        if done:
            logger.info('train stopped max_steps=%d', config.max_steps)
            break

    if state.optimizer.skipped:
        logger.warning('train skipped_steps=%d (non-finite gradients)', state.optimizer.skipped)
    if out is not None:
        save_checkpoint(out / 'last.ckpt', store, {'epoch': state.epoch, 'dataset': dataset.content_hash()})
    if len(test_idx):
        report, losses, _ = evaluate(state.best_store, dataset, test_idx, topo, loss_config, config.mpjpe_scale,
                                     config.batch_size)
        state.history.append(_metric_row(state.best_epoch, 'test', report, losses, float('nan')))
    if out is not None:
        _write_run_outputs(state, config)
    return state


def _write_run_outputs(state: TrainRunState, config: TrainConfig) -> None:
    out = state.out_dir
    frame = state.metrics_frame()
    frame.to_csv(out / 'metrics.csv', index=False, float_format='%.8g')
    summary = {
        'epochs_run': state.epoch,
        'steps': state.step,
        'best_epoch': state.best_epoch,
        'best_val_mpjpe': state.best_val,
        'final_lr': state.scheduler.lr,
        'lr_reductions': state.scheduler.reductions,
        'skipped_steps': state.optimizer.skipped,
        'params': state.store.count(),
    }
    test_rows = frame[frame['split'] == 'test']
    if not test_rows.empty:
        summary['test'] = {k: float(v) for k, v in test_rows.iloc[-1].items()
                           if k not in ('epoch', 'split', 'lr')}
    (out / 'summary.json').write_text(json.dumps(summary, indent=2) + '\n', encoding='utf-8')
    if config.write_plots:
        save_figure(create_training_curves(frame), out / 'curves.html')


def cross_validate_loso(dataset: PoseDataset, config: Optional[TrainConfig] = None,
                        model_config: Optional[WiFlowConfig] = None, loss_config: Optional[LossConfig] = None,
                        out_dir=None, topo: SkeletonTopology = DEFAULT_TOPOLOGY, seed: int = 0,
                        config_echo: Optional[Dict[str, Any]] = None) -> pd.DataFrame:
    """One fold per subject; returns per-fold test metrics plus mean and std rows."""
    sessions = dataset.sessions()
    rows = []
    for subject in sorted(set(sessions.values())):
        fold_split = split_loso(sessions, subject, seed)
        fold_dir = Path(out_dir) / f'fold_{subject}' if out_dir is not None else None
        state = train(dataset, fold_split, config, model_config, loss_config, fold_dir, topo, config_echo)
        test = [r for r in state.history if r['split'] == 'test']
        row = {'fold': subject, **{k: v for k, v in test[-1].items() if k not in ('epoch', 'split', 'lr')}}
        rows.append(row)
        logger.info('loso fold=%s mpjpe=%.6f pck20=%.4f', subject, row['mpjpe'], row['pck20'])
    folds = pd.DataFrame(rows)
    values = folds.drop(columns='fold')
    summary = pd.concat([
        folds,
        pd.DataFrame([{'fold': 'mean', **values.mean().to_dict()}, {'fold': 'std', **values.std(ddof=0).to_dict()}]),
    ], ignore_index=True)
    if out_dir is not None:
        summary.to_csv(Path(out_dir) / 'loso_summary.csv', index=False, float_format='%.8g')
    return summary
