"""
Tests for the training losses and the PCK / MPJPE metrics.

Oracles are plain double loops over samples and joints.
Run with: pytest tests/test_objectives.py -v
"""
import numpy as np
import pytest

from core.errors import ConfigError, ShapeError
from core.objectives import (
    LossConfig,
    MetricReport,
    bone_loss,
    keypoint_loss,
    loss_breakdown,
    merge_reports,
    metric_report,
    mpjpe,
    pck,
    pck_label,
    smooth_l1_h,
    total_loss,
)
from core.pose_labels import DEFAULT_TOPOLOGY, reference_scale
from core.tensor_core import Tensor, backward


def _pck_loop(pred, gt, scales, alpha):
    hits = total = 0
    for n in range(pred.shape[0]):
        for k in range(pred.shape[1]):
            d = np.sqrt((pred[n, k, 0] - gt[n, k, 0]) ** 2 + (pred[n, k, 1] - gt[n, k, 1]) ** 2)
            hits += d / scales[n] <= alpha
            total += 1
    return hits / total


def _mpjpe_loop(pred, gt):
    acc = 0.0
    for n in range(pred.shape[0]):
        for k in range(pred.shape[1]):
            acc += np.sqrt((pred[n, k, 0] - gt[n, k, 0]) ** 2 + (pred[n, k, 1] - gt[n, k, 1]) ** 2)
    return acc / (pred.shape[0] * pred.shape[1])


def _keypoint_loss_loop(pred, gt, beta):
    acc = 0.0
    for n in range(pred.shape[0]):
        for k in range(pred.shape[1]):
            for c in range(2):
                acc += smooth_l1_h(pred[n, k, c] - gt[n, k, c], beta)
    return acc / (pred.shape[0] * pred.shape[1])


def test_metrics_match_loops(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 4))
        gt = rng.normal(size=(n, 15, 2))
        pred = gt + rng.normal(scale=rng.uniform(0.05, 1.0), size=gt.shape)
        scales = reference_scale(gt)
        alpha = float(rng.uniform(0.05, 0.6))
        assert pck(pred, gt, scales, alpha) == pytest.approx(_pck_loop(pred, gt, scales, alpha), abs=1e-7)
        assert mpjpe(pred, gt) == pytest.approx(_mpjpe_loop(pred, gt), abs=1e-7)


def test_pck_is_monotone_in_alpha(rng):
    gt = rng.normal(size=(8, 15, 2))
    pred = gt + rng.normal(scale=0.3, size=gt.shape)
    report = metric_report(pred, gt)
    values = [report.pck[a] for a in sorted(report.pck)]
    assert values == sorted(values)


def test_pck_counts_threshold_as_hit():
    gt = np.zeros((1, 15, 2))
    gt[0, DEFAULT_TOPOLOGY.right_shoulder] = [0.0, 1.0]
    pred = gt.copy()
    pred[0, 0, 0] += 0.25
    assert pck(pred, gt, reference_scale(gt), 0.25) == 1.0


def test_pck_rejects_non_positive_scale():
    with pytest.raises(ConfigError):
        pck(np.zeros((1, 15, 2)), np.zeros((1, 15, 2)), [0.0], 0.2)


def test_mpjpe_unit_scale_and_shape_check(rng):
    gt = rng.normal(size=(2, 15, 2))
    pred = gt + 1.0
    assert mpjpe(pred, gt, unit_scale=1000.0) == pytest.approx(1000.0 * np.sqrt(2.0))
    with pytest.raises(ShapeError):
        mpjpe(pred[:, :14], gt)


def test_keypoint_loss_matches_loop(rng):
    gt = rng.normal(size=(3, 15, 2))
    pred = gt + rng.normal(scale=0.2, size=gt.shape)
    assert keypoint_loss(Tensor(pred, dtype=np.float64), gt, 0.1).item() == pytest.approx(
        _keypoint_loss_loop(pred, gt, 0.1), rel=1e-10)


def test_smooth_l1_continuous_at_beta():
    beta = 0.1
    assert abs(smooth_l1_h(beta - 1e-12, beta) - smooth_l1_h(beta + 1e-12, beta)) < 1e-6
    assert smooth_l1_h(0.0, beta) == 0.0
    with pytest.raises(ConfigError):
        smooth_l1_h(1.0, 0.0)


def test_total_loss_zero_iff_equal(rng):
    gt = rng.normal(size=(2, 15, 2))
    assert total_loss(Tensor(gt, dtype=np.float64), gt).item() == 0.0
    moved = gt.copy()
    moved[1, 4, 0] += 1e-3
    assert total_loss(Tensor(moved, dtype=np.float64), gt).item() > 0.0


def test_bone_loss_translation_invariant(rng):
    gt = rng.normal(size=(4, 15, 2))
    pred = rng.normal(size=(4, 15, 2))
    base = bone_loss(Tensor(pred, dtype=np.float64), gt).item()
    shifted = bone_loss(Tensor(pred + [2.5, -1.5], dtype=np.float64), gt + [-4.0, 3.0]).item()
    assert abs(base - shifted) <= 1e-9


def test_lambda_zero_is_keypoint_loss(rng):
    gt = rng.normal(size=(2, 15, 2))
    pred = Tensor(gt + rng.normal(size=gt.shape), dtype=np.float64)
    total, l_h, l_b = loss_breakdown(pred, gt, config=LossConfig(lambda_bone=0.0))
    assert total.item() == keypoint_loss(pred, gt, 0.1).item() == l_h
    assert l_b > 0.0


def test_bone_loss_does_not_move_ground_truth(rng):
    gt = Tensor(rng.normal(size=(2, 15, 2)), requires_grad=True, dtype=np.float64)
    pred = Tensor(rng.normal(size=(2, 15, 2)), requires_grad=True, dtype=np.float64)
    backward(bone_loss(pred, gt))
    assert gt.grad is None
    assert pred.grad is not None


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(beta_main=0.0).validate()
    with pytest.raises(ConfigError):
        LossConfig(lambda_bone=-1.0).validate()


def test_merge_reports_weights_by_samples():
    a = MetricReport({0.2: 1.0}, 1.0, 1)
    b = MetricReport({0.2: 0.0}, 4.0, 3)
    merged = merge_reports([a, b])
    assert merged.sample_count == 4
    assert merged.pck[0.2] == pytest.approx(0.25)
    assert merged.mpjpe == pytest.approx(3.25)
    assert pck_label(0.2) == 'pck20'
    assert set(merged.as_row()) == {'pck10', 'pck20', 'pck30', 'pck40', 'pck50', 'mpjpe'}
