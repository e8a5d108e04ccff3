"""
Tests for session splits, AdamW, the plateau scheduler, batching and the
train / evaluate loop on small synthetic sessions.

Run with: pytest tests/test_training_engine.py -v
"""
import json

import numpy as np
import pandas as pd
import pytest

from core.errors import MissingKeypointError, SplitError, TrainingDivergedError
from core.tensor_core import Tensor
from core.checkpoint import load_checkpoint
from core.training_engine import (
    METRIC_COLUMNS,
    OptimizerState,
    PlateauScheduler,
    SplitResult,
    SplitSpec,
    TrainConfig,
    adamw_step,
    cross_validate_loso,
    evaluate,
    evaluate_checkpoint,
    group_metrics,
    iterate_batches,
    plateau_scheduler_step,
    resolve_split,
    split_loso,
    split_random_session,
    train,
)

QUICK = dict(epochs=1, batch_size=32, lr=1e-3, max_steps=2, write_plots=False)


def _subjects(n_subjects=5, per_subject=2):
    return {f'S{s:02d}_R{r:02d}': f'S{s:02d}' for s in range(1, n_subjects + 1) for r in range(1, per_subject + 1)}


def test_random_split_partitions_sessions():
    sessions = list(_subjects())
    split = split_random_session(sessions, seed=3)
    assert (len(split.train), len(split.val), len(split.test)) == (7, 2, 1)
    assert sorted(split.train + split.val + split.test) == sorted(sessions)
    assert split == split_random_session(list(reversed(sessions)), seed=3)


def test_random_split_keeps_every_set_nonempty():
    split = split_random_session(['a', 'b', 'c'])
    assert len(split.train) == len(split.val) == len(split.test) == 1
    with pytest.raises(SplitError):
        split_random_session(['a', 'b'])


@pytest.mark.parametrize("subject", ['S01', 'S02', 'S03', 'S04', 'S05'])
def test_loso_excludes_test_subject(subject):
    sessions = _subjects()
    split = split_loso(sessions, subject, seed=1)
    assert sorted(split.test) == [f'{subject}_R01', f'{subject}_R02']
    assert all(sessions[s] != subject for s in split.train + split.val)
    assert (len(split.train), len(split.val)) == (7, 1)


def test_loso_unknown_subject():
    with pytest.raises(SplitError):
        split_loso(_subjects(), 'S09')


def test_split_manifest_round_trip(tmp_path):
    split = split_loso(_subjects(), 'S02', seed=4)
    split.to_json(tmp_path / 'split.json')
    assert SplitResult.from_json(tmp_path / 'split.json') == split
    with pytest.raises(SplitError):
        SplitResult(['a'], ['a'], ['b']).check_partition(['a', 'b'])
    with pytest.raises(SplitError):
        SplitResult(['a'], ['b'], ['c']).check_partition(['a', 'b', 'c', 'd'])


def test_resolve_split_spec(synth_dataset):
    split = resolve_split(synth_dataset, SplitSpec(mode='loso', test_subject='S03'))
    assert sorted(split.test) == ['S03_R01', 'S03_R02']


def test_adamw_first_step_moves_by_lr():
    p = Tensor(np.array([1.0, -2.0, 0.5]), dtype=np.float64)
    state = OptimizerState()
    assert adamw_step({'p': p}, state, lr=0.01, weight_decay=0.0, grads={'p': np.array([3.0, -0.5, 0.0])})
    assert np.allclose(p.data, [0.99, -1.99, 0.5], atol=1e-6)
    assert state.step == 1


def test_adamw_decoupled_weight_decay():
    p = Tensor(np.array([2.0]), dtype=np.float64)
    adamw_step({'p': p}, OptimizerState(), lr=0.1, weight_decay=0.5, grads={'p': np.zeros(1)})
    assert np.allclose(p.data, [2.0 * (1 - 0.05)])


def test_adamw_skips_non_finite_gradients():
    p = Tensor(np.array([1.0, 2.0]), dtype=np.float64)
    state = OptimizerState()
    assert not adamw_step({'p': p}, state, lr=0.1, weight_decay=0.0, grads={'p': np.array([np.nan, 1.0])})
    assert np.array_equal(p.data, [1.0, 2.0])
    assert state.skipped == 1 and state.step == 0


def test_plateau_scheduler_halves_after_patience():
    sched = PlateauScheduler(lr=1e-3, factor=0.5, patience=3, min_lr=3e-4)
    lrs = [plateau_scheduler_step(sched, v) for v in [1.0, 0.9, 0.9, 0.95, 0.9]]
    assert lrs == [1e-3, 1e-3, 1e-3, 1e-3, 5e-4]
    for _ in range(6):
        plateau_scheduler_step(sched, 1.0)
    assert sched.lr == 3e-4
    assert sched.reductions == 2


def test_prefetch_keeps_batch_order(synth_dataset):
    indices = np.arange(100)
    plain = [b[1] for b in iterate_batches(synth_dataset, indices, 16, np.random.default_rng(7))]
    fetched = [b[1] for b in iterate_batches(synth_dataset, indices, 16, np.random.default_rng(7), prefetch=2)]
    assert len(plain) == 7
    assert all(np.array_equal(a, b) for a, b in zip(plain, fetched))
    assert sorted(np.concatenate(plain)) == list(indices)


def test_prefetch_stops_cleanly_on_early_exit(synth_dataset):
    batches = iterate_batches(synth_dataset, np.arange(200), 8, np.random.default_rng(0), prefetch=1)
    first = next(batches)
    batches.close()
    assert first[0] == 0


def test_train_writes_run_directory(synth_dataset, tiny_config, tmp_path):
    config = TrainConfig(**{**QUICK, 'write_plots': True})
    state = train(synth_dataset, SplitSpec(seed=0), config, tiny_config, out_dir=tmp_path / 'run',
                  config_echo={'train.epochs': 1})
    run = tmp_path / 'run'
    for name in ('config.json', 'split.json', 'best.ckpt', 'last.ckpt', 'metrics.csv', 'summary.json',
                 'curves.html'):
        assert (run / name).exists(), name
    metrics = pd.read_csv(run / 'metrics.csv')
    assert list(metrics.columns) == METRIC_COLUMNS
    assert list(metrics['split']) == ['train', 'val', 'train', 'val', 'test']
    assert state.step == 2
    summary = json.loads((run / 'summary.json').read_text())
    assert summary['steps'] == 2
    assert 'test' in summary
    assert SplitResult.from_json(run / 'split.json') == state.split


def test_training_is_deterministic(synth_dataset, tiny_config):
    split = resolve_split(synth_dataset, SplitSpec(seed=1))
    first = train(synth_dataset, split, TrainConfig(**QUICK), tiny_config)
    second = train(synth_dataset, split, TrainConfig(**{**QUICK, 'prefetch': 2}), tiny_config)
    a, b = first.metrics_frame(), second.metrics_frame()
    pd.testing.assert_frame_equal(a, b)
    for name in first.store.names():
        assert np.array_equal(first.store.params[name].data, second.store.params[name].data)


def test_zero_epochs_is_baseline_only(synth_dataset, tiny_config):
    state = train(synth_dataset, SplitSpec(), TrainConfig(epochs=0, eval_train=False, write_plots=False),
                  tiny_config)
    assert state.step == 0
    assert list(state.metrics_frame()['split']) == ['val', 'test']


def test_missing_keypoints_block_training(synth_dataset, tiny_config):
    dirty = synth_dataset.subset(np.arange(len(synth_dataset)))
    dirty.missing[5, 3] = True
    with pytest.raises(MissingKeypointError):
        train(dirty, SplitSpec(), TrainConfig(**QUICK), tiny_config)


def test_divergence_dumps_offending_batch(synth_dataset, tiny_config, tmp_path):
    split = resolve_split(synth_dataset, SplitSpec())
    broken = synth_dataset.subset(np.arange(len(synth_dataset)))
    broken.poses[broken.indices_for(split.train), 0, 0] = np.inf
    config = TrainConfig(**{**QUICK, 'eval_train': False})
    with pytest.raises(TrainingDivergedError) as info:
        train(broken, split, config, tiny_config, out_dir=tmp_path)
    assert info.value.epoch == 1 and info.value.batch_id == 0
    dump = json.loads((tmp_path / 'diverged_batch.json').read_text())
    assert len(dump['indices']) == 32


def test_evaluate_checkpoint_by_group(synth_dataset, tiny_config, tmp_path):
    state = train(synth_dataset, SplitSpec(seed=2), TrainConfig(**QUICK), tiny_config, out_dir=tmp_path / 'run')
    report, groups = evaluate_checkpoint(tmp_path / 'run' / 'best.ckpt', synth_dataset, state.split, 'test',
                                         out_dir=tmp_path / 'eval')
    assert report.sample_count == len(synth_dataset.indices_for(state.split.test))
    assert set(groups['group_by']) == {'action', 'subject'}
    assert (tmp_path / 'eval' / 'eval_metrics.csv').exists()
    assert (tmp_path / 'eval' / 'eval_by_group.csv').exists()
    with pytest.raises(SplitError):
        evaluate_checkpoint(tmp_path / 'run' / 'best.ckpt', synth_dataset,
                            SplitResult(state.split.train, state.split.val, []), 'test')


def test_group_metrics_weights_each_window(synth_dataset):
    indices = np.arange(240)
    gt = synth_dataset.poses[indices]
    groups = group_metrics(gt.astype(np.float64), synth_dataset, indices)
    assert np.allclose(groups['mpjpe'], 0.0)
    assert np.allclose(groups['pck20'], 1.0)
    assert groups.loc[groups['group_by'] == 'subject', 'windows'].sum() == 240


def test_cross_validation_runs_every_fold(synth_dataset, tiny_config, tmp_path):
    config = TrainConfig(**{**QUICK, 'max_steps': 1, 'eval_train': False})
    summary = cross_validate_loso(synth_dataset, config, tiny_config, out_dir=tmp_path)
    assert list(summary['fold']) == ['S01', 'S02', 'S03', 'mean', 'std']
    assert (tmp_path / 'loso_summary.csv').exists()
    assert (tmp_path / 'fold_S02' / 'split.json').exists()


def test_test_split_scored_on_best_validation_store(synth_dataset, tiny_config, tmp_path):
    small = synth_dataset.subset(np.arange(360))
    sessions = list(small.sessions())
    split = SplitResult(sessions[:1], sessions[1:2], sessions[2:3])
    config = TrainConfig(**{**QUICK, 'epochs': 2, 'max_steps': 0, 'eval_train': False})
    kept = train(small, split, config, tiny_config)
    written = train(small, split, config, tiny_config, out_dir=tmp_path / 'run')
    assert kept.best_epoch == written.best_epoch

    test_row = kept.metrics_frame().query("split == 'test'").iloc[0]
    assert test_row['epoch'] == kept.best_epoch
    report, _, _ = evaluate(kept.best_store, small, small.indices_for(split.test),
                            unit_scale=config.mpjpe_scale, batch_size=config.batch_size)
    assert test_row['mpjpe'] == pytest.approx(report.mpjpe)
    assert test_row['mpjpe'] == pytest.approx(written.metrics_frame().query("split == 'test'").iloc[0]['mpjpe'])

    best, _ = load_checkpoint(tmp_path / 'run' / 'best.ckpt')
    for name in best.names():
        assert np.array_equal(best.params[name].data, kept.best_store.params[name].data)


@pytest.mark.slow
def test_overfits_small_training_set(synth_dataset, tiny_config):
    """300 steps on 512 windows: training MPJPE below a tenth of its start, PCK@50 >= 0.95."""
    small = synth_dataset.subset(np.arange(512))
    sessions = list(small.sessions())
    split = SplitResult(sessions[:-1], sessions[-1:], [])
    config = TrainConfig(epochs=1000, batch_size=32, lr=2e-3, max_steps=300, write_plots=False)
    state = train(small, split, config, tiny_config)
    frame = state.metrics_frame()
    train_rows = frame[frame['split'] == 'train']
    assert train_rows['mpjpe'].iloc[-1] < 0.1 * train_rows['mpjpe'].iloc[0]
    assert train_rows['pck50'].iloc[-1] >= 0.95
