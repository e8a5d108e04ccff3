"""
Training objectives and evaluation metrics for 15-keypoint pose regression.

Losses operate on autodiff tensors; metrics on plain arrays in 64-bit.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from core.errors import ConfigError, ShapeError
from core.pose_labels import DEFAULT_TOPOLOGY, SkeletonTopology, reference_scale
from core.tensor_core import Tensor, as_tensor, matmul, mean, no_grad, scale, smooth_l1, sub, sum_, vector_norm

logger = logging.getLogger(__name__)

PCK_ALPHAS = (0.1, 0.2, 0.3, 0.4, 0.5)


def pck_label(alpha: float) -> str:
    """0.2 -> 'pck20'."""
    return f'pck{int(round(alpha * 100))}'


@dataclass
class LossConfig:
    beta_main: float = 0.1
    beta_bone: float = 0.05
    lambda_bone: float = 0.2

    def validate(self) -> None:
        if self.beta_main <= 0:
            raise ConfigError('loss.beta_main', 'must be positive')
        if self.beta_bone <= 0:
            raise ConfigError('loss.beta_bone', 'must be positive')
        if self.lambda_bone < 0:
            raise ConfigError('loss.lambda_bone', 'must be >= 0')


@dataclass
class MetricReport:
    pck: Dict[float, float] = field(default_factory=dict)
    mpjpe: float = 0.0
    sample_count: int = 0

    def as_row(self) -> Dict[str, float]:
        row = {pck_label(a): self.pck.get(a, float('nan')) for a in PCK_ALPHAS}
        row['mpjpe'] = self.mpjpe
        return row


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def smooth_l1_h(x, beta: float):
    """Scalar or array Smooth-L1 kernel: 0.5 x^2 / beta below beta, |x| - 0.5 beta above."""
    if beta <= 0:
        raise ConfigError('loss.beta', 'must be positive')
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    out = np.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)
    return float(out) if out.ndim == 0 else out


def _pair(pred, gt) -> Tuple[Tensor, Tensor]:
    pred = as_tensor(pred)
    gt = as_tensor(gt, pred)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[-1] != 2:
        raise ShapeError(f'pose tensors must both be N x K x 2, got {pred.shape} and {gt.shape}')
    return pred, gt


def keypoint_loss(pred, gt, beta_main: float = 0.1) -> Tensor:
    pred, gt = _pair(pred, gt)
    per_joint = sum_(smooth_l1(sub(pred, gt), beta_main), axis=2)
    return mean(per_joint)


def bone_vectors(pose: Tensor, topo: SkeletonTopology) -> Tensor:
    """N x E x 2 edge vectors as an incidence-matrix product."""
    incidence = as_tensor(topo.incidence(), pose)
    return matmul(incidence, pose)


def bone_loss(pred, gt, topo: SkeletonTopology = DEFAULT_TOPOLOGY, beta_bone: float = 0.05) -> Tensor:
    pred, gt = _pair(pred, gt)
    if len(topo.edges) != 14:
        raise ConfigError('topology.edges', f'bone loss needs 14 edges, got {len(topo.edges)}')
    gt_lengths = vector_norm(bone_vectors(gt.detach(), topo), axis=-1).detach()
    pred_lengths = vector_norm(bone_vectors(pred, topo), axis=-1)
    return mean(smooth_l1(sub(pred_lengths, gt_lengths), beta_bone))


def loss_breakdown(pred, gt, topo: SkeletonTopology = DEFAULT_TOPOLOGY,
                   config: Optional[LossConfig] = None) -> Tuple[Tensor, float, float]:
    """Total loss tensor plus its keypoint and bone components as floats."""
    config = config or LossConfig()
    l_h = keypoint_loss(pred, gt, config.beta_main)
    if config.lambda_bone == 0:
        with_bone = l_h
        with no_grad():
            l_b = bone_loss(pred, gt, topo, config.beta_bone).item()
    else:
        l_b_tensor = bone_loss(pred, gt, topo, config.beta_bone)
        with_bone = l_h + scale(l_b_tensor, config.lambda_bone)
        l_b = l_b_tensor.item()
    return with_bone, l_h.item(), l_b


def total_loss(pred, gt, topo: SkeletonTopology = DEFAULT_TOPOLOGY, config: Optional[LossConfig] = None) -> Tensor:
    """Keypoint loss plus lambda times the bone loss."""
    return loss_breakdown(pred, gt, topo, config)[0]


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _arrays(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[-1] != 2:
        raise ShapeError(f'pose arrays must both be N x K x 2, got {pred.shape} and {gt.shape}')
    return pred, gt


def joint_errors(pred, gt) -> np.ndarray:
    pred, gt = _arrays(pred, gt)
    return np.linalg.norm(pred - gt, axis=-1)


def pck(pred, gt, scales, alpha: float) -> float:
    """Fraction of joints whose error over the sample's scale is <= alpha."""
    errors = joint_errors(pred, gt)
    scales = np.asarray(scales, dtype=np.float64).reshape(-1, 1)
    if np.any(scales <= 0):
        raise ConfigError('scales', 'reference scales must be positive')
    if errors.size == 0:
        return float('nan')
    return float(np.mean(errors / scales <= alpha))


def mpjpe(pred, gt, unit_scale: float = 1.0) -> float:
    """Mean joint error, multiplied by ``unit_scale`` (label units by default)."""
    errors = joint_errors(pred, gt)
    if errors.size == 0:
        return float('nan')
    return float(errors.mean() * unit_scale)


def metric_report(pred, gt, topo: SkeletonTopology = DEFAULT_TOPOLOGY, unit_scale: float = 1.0,
                  alphas: Sequence[float] = PCK_ALPHAS) -> MetricReport:
    pred, gt = _arrays(pred, gt)
    scales = reference_scale(gt, topo)
    return MetricReport(
        pck={a: pck(pred, gt, scales, a) for a in alphas},
        mpjpe=mpjpe(pred, gt, unit_scale),
        sample_count=len(pred),
    )


def merge_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Sample-count weighted average of shard reports."""
    reports = [r for r in reports if r.sample_count]
    total = sum(r.sample_count for r in reports)
    if not total:
        return MetricReport()
    alphas = sorted({a for r in reports for a in r.pck})
    return MetricReport(
        pck={a: sum(r.pck[a] * r.sample_count for r in reports) / total for a in alphas},
        mpjpe=sum(r.mpjpe * r.sample_count for r in reports) / total,
        sample_count=total,
    )
