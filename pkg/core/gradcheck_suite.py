"""
Finite-difference gradient checks for every differentiable op and for the
full training loss of a reduced-size network.

Used by ``wiflow.py gradcheck`` and by the test suite.
"""
import logging
import time
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core.objectives import LossConfig, bone_loss, keypoint_loss, total_loss
from core.pose_labels import DEFAULT_TOPOLOGY
from core.tensor_core import (
    BatchNormState,
    Tensor,
    adaptive_avg_pool_last,
    batch_norm,
    concat,
    conv2d,
    dilated_causal_conv1d,
    grad_check,
    grad_check_per_input,
    matmul,
    mean,
    mul,
    precision,
    reshape,
    sigmoid,
    silu,
    smooth_l1,
    softmax,
    sum_,
    transpose,
    vector_norm,
)
from core.wiflow_model import WiFlowConfig, forward, init_model

logger = logging.getLogger(__name__)

Case = Tuple[Callable[..., Tensor], List[Tensor]]


def tiny_model_config() -> WiFlowConfig:
    """Reduced network with the full layer structure and 15 keypoints."""
    return WiFlowConfig(
        input_channels=80,
        window_T=5,
        tcn_channel_schedule=[80, 70, 60],
        tcn_dilations=[1, 2, 4],
        tcn_groups=10,
        spatial_channel_schedule=[2, 4],
        attention_groups=2,
        decoder_mid_channels=4,
    )


def _leaf(rng: np.random.Generator, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar reduction with fixed random weights so every output entry matters."""
    return sum_(mul(out, Tensor(weights.reshape(out.shape), dtype=out.dtype)))


def _case_conv1d(rng) -> Case:
    x, w, b = _leaf(rng, 2, 6, 7), _leaf(rng, 4, 3, 3), _leaf(rng, 4)
    weights = rng.normal(size=(2, 4, 7))
    return (lambda x, w, b: _weighted(dilated_causal_conv1d(x, w, b, dilation=2, groups=2), weights)), [x, w, b]


def _case_conv2d(rng) -> Case:
    x, w, b = _leaf(rng, 2, 3, 4, 6), _leaf(rng, 2, 3, 1, 3), _leaf(rng, 2)
    weights = rng.normal(size=(2, 2, 4, 3))
    return (lambda x, w, b: _weighted(conv2d(x, w, b, stride=(1, 2), padding=(0, 1)), weights)), [x, w, b]


def _case_batch_norm(training: bool):
    def build(rng) -> Case:
        x, gamma, beta = _leaf(rng, 4, 3, 5), _leaf(rng, 3), _leaf(rng, 3)
        weights = rng.normal(size=(4, 3, 5))
        running_mean = rng.normal(size=3)
        running_var = rng.uniform(0.5, 2.0, size=3)

        def closure(x, gamma, beta):
            state = BatchNormState(gamma, beta, running_mean.copy(), running_var.copy(), training=training)
            return _weighted(batch_norm(x, state), weights)
        return closure, [x, gamma, beta]
    return build


def _case_unary(op):
    def build(rng) -> Case:
        x = _leaf(rng, 3, 4)
        weights = rng.normal(size=(3, 4))
        return (lambda x: _weighted(op(x), weights)), [x]
    return build


def _case_matmul(rng) -> Case:
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    weights = rng.normal(size=(2, 3, 5))
    return (lambda a, b: _weighted(matmul(a, b), weights)), [a, b]


def _case_reorder(rng) -> Case:
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 3, 4)
    weights = rng.normal(size=(4, 2, 6))

    def closure(a, b):
        joined = concat([a, b], axis=1)
        return _weighted(reshape(transpose(joined, (2, 0, 1)), (4, 2, 6)), weights)
    return closure, [a, b]


def _case_pool(rng) -> Case:
    x = _leaf(rng, 2, 3, 5)
    weights = rng.normal(size=(2, 3, 1))
    return (lambda x: _weighted(adaptive_avg_pool_last(x), weights)), [x]


def _case_softmax_cross(rng) -> Case:
    x = _leaf(rng, 3, 5)
    target = rng.dirichlet(np.ones(5), size=3)
    return (lambda x: mean(mul(softmax(x, axis=-1), Tensor(target, dtype=x.dtype)))), [x]


def _case_pose_loss(loss):
    def build(rng) -> Case:
        pred = _leaf(rng, 2, 15, 2)
        gt = rng.normal(size=(2, 15, 2))
        return (lambda pred: loss(pred, gt)), [pred]
    return build


OP_CASES: Dict[str, Callable[[np.random.Generator], Case]] = {
    'dilated_causal_conv1d': _case_conv1d,
    'conv2d': _case_conv2d,
    'batch_norm_train': _case_batch_norm(True),
    'batch_norm_eval': _case_batch_norm(False),
    'silu': _case_unary(silu),
    'sigmoid': _case_unary(sigmoid),
    'softmax': _case_unary(lambda x: softmax(x, axis=1)),
    'softmax_cross': _case_softmax_cross,
    'matmul': _case_matmul,
    'transpose_reshape_concat': _case_reorder,
    'adaptive_avg_pool_last': _case_pool,
    'smooth_l1': _case_unary(lambda x: smooth_l1(x, 0.1)),
    'vector_norm': _case_unary(lambda x: vector_norm(x, axis=-1)),
    'keypoint_loss': _case_pose_loss(lambda p, g: keypoint_loss(p, g, 0.1)),
    'bone_loss': _case_pose_loss(lambda p, g: bone_loss(p, g, DEFAULT_TOPOLOGY, 0.05)),
    'total_loss': _case_pose_loss(lambda p, g: total_loss(p, g, DEFAULT_TOPOLOGY, LossConfig())),
}


def run_op_checks(seeds: Sequence[int] = range(20), bits: int = 64, eps: float = 1e-5,
                  ops: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """Worst relative error per op over all seeds."""
    rows = []
    for name in ops or OP_CASES:
        worst = 0.0
        for seed in seeds:
            with precision(bits):
                closure, inputs = OP_CASES[name](np.random.default_rng(seed))
                worst = max(worst, grad_check(closure, inputs, eps))
        rows.append({'check': name, 'seeds': len(list(seeds)), 'max_rel_error': worst})
    return pd.DataFrame(rows)


def layer_of(path: str) -> str:
    """'tcn.0.conv1.weight' -> 'tcn.0', 'spatial.res2.bn1.gamma' -> 'spatial.res2'."""
    parts = path.split('.')
    if parts[0] == 'spatial' and parts[1] == 'up':
        return 'spatial.up'
    return '.'.join(parts[:2]) if parts[0] != 'decoder' else 'decoder'


def run_model_check(config: Optional[WiFlowConfig] = None, seed: int = 0, bits: int = 64, batch: int = 2,
                    max_entries: Optional[int] = 6, eps: float = 1e-5) -> pd.DataFrame:
    """Per-parameter worst relative error of the training loss through the whole network."""
    config = config or tiny_model_config()
    rng = np.random.default_rng(seed)
    with precision(bits):
        store = init_model(config, seed)
        names = store.names()
        windows = rng.normal(size=(batch, config.input_channels, config.window_T))
        poses = rng.normal(size=(batch, config.keypoints, 2))

        def closure(*tensors):
            swapped = store.with_params(dict(zip(names, tensors)))
            return total_loss(forward(windows, swapped, 'train'), poses)

        started = time.perf_counter()
        errors = grad_check_per_input(closure, [store.params[n] for n in names], eps, max_entries, seed)
    logger.info('gradcheck model params=%d tensors=%d elapsed=%.3fs', store.count(), len(names),
                time.perf_counter() - started)
    frame = pd.DataFrame({'parameter': names, 'max_rel_error': errors})
    frame.insert(0, 'layer', frame['parameter'].map(layer_of))
    return frame


def per_layer(frame: pd.DataFrame) -> pd.DataFrame:
    return frame.groupby('layer', sort=False)['max_rel_error'].max().reset_index()
