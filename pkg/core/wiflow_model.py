"""
Pose network: channel-screening TCN, asymmetric-convolution spatial encoder,
two-stage axial attention and a convolutional coordinate decoder.

Shapes for the default configuration (batch axis omitted)::

    Input                540 x 20
    TCN Layer 1..4       540 / 440 / 340 / 240 x 20
    ConvBlock1 (up)      8 x 20 x 240
    ResBlock 1..4        8 x 20 x 120, 16 x 20 x 60, 32 x 20 x 30, 64 x 20 x 15
    AxialAttention       64 x 15 x 20
    Decoder              2 x 15 x 20
    Avg Pooling          2 x 15 x 1
    Output               15 x 2

All learnable tensors live in a ParameterStore keyed by layer path, e.g.
``tcn.0.conv1.weight``, ``spatial.res2.bn1.gamma`` or ``attention.height.w_q``.
Batch-norm running statistics are buffers (``...bn.running_mean``).
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from core.config import env_flag
from core.errors import ConfigError, ShapeError
from core.tensor_core import (
    BatchNormState,
    Tensor,
    adaptive_avg_pool_last,
    batch_norm,
    conv2d,
    default_dtype,
    dilated_causal_conv1d,
    matmul,
    no_grad,
    reshape,
    scale,
    silu,
    softmax,
    transpose,
    uniform_init,
    zeros_param,
)

logger = logging.getLogger(__name__)

REPORTED_PARAMS = 2.23e6
REPORTED_MACS = 0.07e9


@dataclass
class WiFlowConfig:
    input_channels: int = 540
    window_T: int = 20
    tcn_channel_schedule: List[int] = field(default_factory=lambda: [540, 440, 340, 240])
    tcn_dilations: List[int] = field(default_factory=lambda: [1, 2, 4, 8])
    tcn_kernel: int = 3
    tcn_groups: int = 20
    tcn_convs_per_block: int = 2
    tcn_residual: bool = True
    spatial_channel_schedule: List[int] = field(default_factory=lambda: [8, 16, 32, 64])
    spatial_kernel_w: int = 3
    up_convs: int = 3
    asym_stride_conv: int = 0
    keypoints: int = 15
    attention_groups: int = 8
    attention_layers: int = 1
    decoder_mid_channels: int = 32

    def validate(self) -> None:
        schedule = list(self.tcn_channel_schedule)
        spatial = list(self.spatial_channel_schedule)
        if self.input_channels < 1 or self.window_T < 1:
            raise ConfigError('model.input_channels', 'input extents must be positive')
        if not schedule:
            raise ConfigError('model.tcn_channel_schedule', 'needs at least one block')
        if len(self.tcn_dilations) != len(schedule):
            raise ConfigError('model.tcn_dilations',
                              f'{len(self.tcn_dilations)} dilations for {len(schedule)} TCN blocks')
        if any(d < 1 for d in self.tcn_dilations):
            raise ConfigError('model.tcn_dilations', 'dilations must be >= 1')
        if schedule[0] > self.input_channels or any(b >= a for a, b in zip(schedule, schedule[1:])):
            raise ConfigError('model.tcn_channel_schedule', f'{schedule} must be strictly decreasing '
                              f'and start at or below input_channels={self.input_channels}')
        if self.tcn_kernel < 1 or self.tcn_convs_per_block < 1:
            raise ConfigError('model.tcn_kernel', 'kernel and convs per block must be >= 1')
        for channels in [self.input_channels] + schedule:
            if self.tcn_groups < 1 or channels % self.tcn_groups:
                raise ConfigError('model.tcn_groups', f'{self.tcn_groups} does not divide {channels}')
        if not spatial:
            raise ConfigError('model.spatial_channel_schedule', 'needs at least one residual block')
        if schedule[-1] != self.keypoints * 2 ** len(spatial):
            raise ConfigError('model.tcn_channel_schedule',
                              f'last TCN width {schedule[-1]} must equal keypoints * 2^{len(spatial)} '
                              f'= {self.keypoints * 2 ** len(spatial)}')
        if self.spatial_kernel_w < 1 or self.spatial_kernel_w % 2 == 0:
            raise ConfigError('model.spatial_kernel_w', 'must be a positive odd number')
        if self.up_convs < 1:
            raise ConfigError('model.up_convs', 'must be >= 1')
        if self.asym_stride_conv not in (0, 1, 2):
            raise ConfigError('model.asym_stride_conv', 'must be 0, 1 or 2')
        if self.attention_layers != 1:
            raise ConfigError('model.attention_layers', 'only a single axial attention layer is supported')
        if self.attention_groups < 1 or spatial[-1] % self.attention_groups:
            raise ConfigError('model.attention_groups',
                              f'{self.attention_groups} does not divide {spatial[-1]} channels')
        if self.decoder_mid_channels < 1:
            raise ConfigError('model.decoder_mid_channels', 'must be >= 1')


# ---------------------------------------------------------------------------
# Layer inventory
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    """One weighted layer: where it lives, its weight shape and its per-sample MACs."""
    path: str
    kind: str
    weight_shape: Tuple[int, ...]
    fan_in: int
    bias: bool = True
    macs: int = 0


def layer_specs(config: WiFlowConfig) -> List[LayerSpec]:
    T = config.window_T
    K = config.keypoints
    kw = config.spatial_kernel_w
    specs: List[LayerSpec] = []

    c_in = config.input_channels
    for l, c_out in enumerate(config.tcn_channel_schedule):
        per = c_in // config.tcn_groups
        for i in range(config.tcn_convs_per_block):
            specs.append(LayerSpec(f'tcn.{l}.conv{i}', 'conv1d', (c_in, per, config.tcn_kernel),
                                   per * config.tcn_kernel, macs=c_in * per * config.tcn_kernel * T))
        specs.append(LayerSpec(f'tcn.{l}.pointwise', 'conv1d', (c_out, c_in, 1), c_in, macs=c_in * c_out * T))
        if config.tcn_residual:
            specs.append(LayerSpec(f'tcn.{l}.shortcut', 'conv1d', (c_out, c_in, 1), c_in, macs=c_in * c_out * T))
        c_in = c_out

    width = config.tcn_channel_schedule[-1]
    spatial = config.spatial_channel_schedule
    c_in = 1
    for i in range(config.up_convs):
        c_out = spatial[0]
        specs.append(LayerSpec(f'spatial.up.{i}.conv', 'conv2d', (c_out, c_in, 1, kw), c_in * kw,
                               macs=c_out * c_in * kw * T * width))
        specs.append(LayerSpec(f'spatial.up.{i}.bn', 'bn', (c_out,), 0))
        c_in = c_out

    for n, c_out in enumerate(spatial, start=1):
        half = width // 2
        for j in (1, 2, 3):
            src = c_in if j == 1 else c_out
            at = half if j - 1 >= config.asym_stride_conv else width
            specs.append(LayerSpec(f'spatial.res{n}.conv{j}', 'conv2d', (c_out, src, 1, kw), src * kw,
                                   macs=c_out * src * kw * T * at))
            if j < 3:
                specs.append(LayerSpec(f'spatial.res{n}.bn{j}', 'bn', (c_out,), 0))
        specs.append(LayerSpec(f'spatial.res{n}.shortcut', 'conv2d', (c_out, c_in, 1, 1), c_in,
                               macs=c_out * c_in * T * half))
        c_in, width = c_out, half

    channels = spatial[-1]
    for stage, length, items in (('width', T, K), ('height', K, T)):
        for name in ('w_q', 'w_k', 'w_v'):
            specs.append(LayerSpec(f'attention.{stage}.{name}', 'proj', (length, length), length, bias=False,
                                   macs=items * channels * length * length))
        specs.append(LayerSpec(f'attention.{stage}.scores', 'attn', (), 0, bias=False,
                               macs=2 * items * channels * length * length))
        specs.append(LayerSpec(f'attention.{stage}.bn', 'bn', (channels,), 0))

    mid = config.decoder_mid_channels
    specs.append(LayerSpec('decoder.conv', 'conv2d', (mid, channels, 3, 3), channels * 9, macs=mid * channels * 9 * K * T))
    specs.append(LayerSpec('decoder.bn', 'bn', (mid,), 0))
    specs.append(LayerSpec('decoder.head', 'conv2d', (2, mid, 1, 1), mid, macs=2 * mid * K * T))
    return specs


def flop_breakdown(config: WiFlowConfig) -> Dict[str, int]:
    """Multiply-accumulates per layer for one sample (batch-norm and activations excluded)."""
    config.validate()
    return {spec.path: spec.macs for spec in layer_specs(config) if spec.macs}


def count_flops(config: WiFlowConfig) -> int:
    return int(sum(flop_breakdown(config).values()))


def count_parameters(config: WiFlowConfig) -> int:
    config.validate()
    total = 0
    for spec in layer_specs(config):
        if spec.kind == 'bn':
            total += 2 * spec.weight_shape[0]
        elif spec.kind != 'attn':
            total += int(np.prod(spec.weight_shape)) + (spec.weight_shape[0] if spec.bias else 0)
    return total


# ---------------------------------------------------------------------------
# Parameter store
# ---------------------------------------------------------------------------

class ParameterStore:
    """Learnable tensors and batch-norm buffers of one model, keyed by layer path."""

    def __init__(self, params: Dict[str, Tensor], buffers: Dict[str, np.ndarray],
                 config: WiFlowConfig, seed: int = 0):
        self.params = params
        self.buffers = buffers
        self.config = config
        self.seed = seed
        # names read since the last forward began, buffers included
        self.touched: Set[str] = set()

    def __getitem__(self, name: str) -> Tensor:
        self.touched.add(name)
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> List[str]:
        return list(self.params)

    def unread(self) -> List[str]:
        """Parameters and buffers the last forward never looked up."""
        return sorted((set(self.params) | set(self.buffers)) - self.touched)

    def block(self, prefix: str) -> Dict[str, Tensor]:
        """Parameters under ``prefix.`` keyed by their remaining suffix."""
        start = prefix + '.'
        return {name[len(start):]: self[name] for name in self.params if name.startswith(start)}

    def bn(self, path: str, training: bool) -> BatchNormState:
        self.touched.update((f'{path}.running_mean', f'{path}.running_var'))
        return BatchNormState(
            gamma=self[f'{path}.gamma'],
            beta=self[f'{path}.beta'],
            running_mean=self.buffers[f'{path}.running_mean'],
            running_var=self.buffers[f'{path}.running_var'],
            training=training,
        )

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def count(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.grad = None

    def with_params(self, params: Mapping[str, Tensor]) -> 'ParameterStore':
        """Same buffers, some tensors swapped (finite-difference closures)."""
        merged = dict(self.params)
        merged.update(params)
        return ParameterStore(merged, self.buffers, self.config, self.seed)

    def astype(self, dtype) -> 'ParameterStore':
        params = {k: Tensor(v.data, requires_grad=True, dtype=dtype) for k, v in self.params.items()}
        buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        return ParameterStore(params, buffers, self.config, self.seed)

    def frozen(self) -> 'ParameterStore':
        """Read-only copy for concurrent eval forwards."""
        params = {k: Tensor(v.data, dtype=v.dtype) for k, v in self.params.items()}
        buffers = {k: v.copy() for k, v in self.buffers.items()}
        return ParameterStore(params, buffers, self.config, self.seed)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {k: v.data for k, v in self.params.items()}
        arrays.update(self.buffers)
        return arrays


def init_model(config: Optional[WiFlowConfig] = None, seed: int = 0, dtype=None) -> ParameterStore:
    """Deterministic per seed: one generator feeds every initializer in layer order."""
    config = config or WiFlowConfig()
    config.validate()
    dtype = dtype or default_dtype()
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    buffers: Dict[str, np.ndarray] = {}
    for spec in layer_specs(config):
        if spec.kind == 'attn':
            continue
        if spec.kind == 'bn':
            state = BatchNormState.create(spec.weight_shape[0], dtype)
            params[f'{spec.path}.gamma'] = state.gamma
            params[f'{spec.path}.beta'] = state.beta
            buffers[f'{spec.path}.running_mean'] = state.running_mean
            buffers[f'{spec.path}.running_var'] = state.running_var
            continue
        weight = uniform_init(rng, spec.weight_shape, spec.fan_in, dtype)
        if spec.kind == 'proj':
            params[spec.path] = weight
            continue
        params[f'{spec.path}.weight'] = weight
        if spec.bias:
            params[f'{spec.path}.bias'] = zeros_param((spec.weight_shape[0],), dtype)
    store = ParameterStore(params, buffers, config, seed)
    logger.info('model params=%d reported=%d ratio=%.3f', store.count(), int(REPORTED_PARAMS),
                store.count() / REPORTED_PARAMS)
    return store


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def tcn_block(x: Tensor, params: Mapping[str, Tensor], dilation: int, groups: int) -> Tensor:
    """Grouped dilated causal convs (SiLU after each), pointwise compression, SiLU.

    A ``shortcut`` entry in ``params`` adds a 1x1 projection of the block
    input before the last activation.
    """
    convs = sorted((k[:-len('.weight')] for k in params if k.startswith('conv') and k.endswith('.weight')),
                   key=lambda name: int(name[len('conv'):]))
    pointwise = params['pointwise.weight']
    if pointwise.shape[0] > pointwise.shape[1]:
        raise ShapeError(f'tcn block widens {pointwise.shape[1]} -> {pointwise.shape[0]} channels')
    h = x
    for name in convs:
        h = silu(dilated_causal_conv1d(h, params[f'{name}.weight'], params.get(f'{name}.bias'),
                                       dilation=dilation, groups=groups))
    out = dilated_causal_conv1d(h, pointwise, params.get('pointwise.bias'))
    if 'shortcut.weight' in params:
        out = out + dilated_causal_conv1d(x, params['shortcut.weight'], params.get('shortcut.bias'))
    return silu(out)


def tcn_encoder(x: Tensor, store: ParameterStore, trace: Optional[list] = None) -> Tensor:
    config = store.config
    for l, dilation in enumerate(config.tcn_dilations):
        x = tcn_block(x, store.block(f'tcn.{l}'), dilation, config.tcn_groups)
        _trace(trace, f'TCN Layer {l + 1}', x)
    return x


def spatial_reshape(x: Tensor) -> Tensor:
    """N x C x T -> N x 1 x T x C: channels become the width axis."""
    n, c, t = x.shape
    return reshape(transpose(x, (0, 2, 1)), (n, 1, t, c))


def spatial_unreshape(x: Tensor) -> Tensor:
    n, _, t, c = x.shape
    return transpose(reshape(x, (n, t, c)), (0, 2, 1))


def conv_block_up(x: Tensor, store: ParameterStore, training: bool) -> Tensor:
    pad = store.config.spatial_kernel_w // 2
    for i in range(store.config.up_convs):
        path = f'spatial.up.{i}'
        x = conv2d(x, store[f'{path}.conv.weight'], store[f'{path}.conv.bias'], padding=(0, pad))
        x = silu(batch_norm(x, store.bn(f'{path}.bn', training)))
    return x


def asym_res_block(x: Tensor, store: ParameterStore, prefix: str, training: bool) -> Tensor:
    """Three 1 x k convolutions with a stride-(1, 2) subcarrier downsampling.

    Sublayers 1 and 2 are conv -> batch norm -> SiLU, sublayer 3 is conv ->
    SiLU. The 1 x 1 strided shortcut is added after that activation.
    """
    width = x.shape[-1]
    if width % 2:
        raise ShapeError(f'{prefix}: subcarrier width {width} must be even')
    config = store.config
    pad = config.spatial_kernel_w // 2
    h = x
    for j in (1, 2, 3):
        stride = (1, 2) if j - 1 == config.asym_stride_conv else (1, 1)
        h = conv2d(h, store[f'{prefix}.conv{j}.weight'], store[f'{prefix}.conv{j}.bias'],
                   stride=stride, padding=(0, pad))
        if j < 3:
            h = batch_norm(h, store.bn(f'{prefix}.bn{j}', training))
        h = silu(h)
    shortcut = conv2d(x, store[f'{prefix}.shortcut.weight'], store[f'{prefix}.shortcut.bias'], stride=(1, 2))
    return h + shortcut


def axial_stage(x: Tensor, store: ParameterStore, prefix: str, groups: int, training: bool) -> Tensor:
    """Grouped scaled dot-product attention along the last axis of a B x C x L input.

    Q, K and V are right-multiplied by L x L matrices; channel rows split into
    ``groups`` groups of d = C / groups and each group attends as
    softmax(Q^T K / sqrt(d)) V^T before a batch norm over C.
    """
    b, c, length = x.shape
    if c % groups:
        raise ShapeError(f'{prefix}: {groups} attention groups do not divide {c} channels')
    d = c // groups
    q = reshape(matmul(x, store[f'{prefix}.w_q']), (b, groups, d, length))
    k = reshape(matmul(x, store[f'{prefix}.w_k']), (b, groups, d, length))
    v = reshape(matmul(x, store[f'{prefix}.w_v']), (b, groups, d, length))
    scores = scale(matmul(transpose(q, (0, 1, 3, 2)), k), 1.0 / math.sqrt(d))
    attended = matmul(softmax(scores, axis=-1), transpose(v, (0, 1, 3, 2)))
    out = reshape(transpose(attended, (0, 1, 3, 2)), (b, c, length))
    return batch_norm(out, store.bn(f'{prefix}.bn', training))


def axial_attention(x: Tensor, store: ParameterStore, training: bool) -> Tensor:
    """N x C x K x T in and out: attention along T, then along K."""
    n, c, kp, t = x.shape
    groups = store.config.attention_groups
    width = reshape(transpose(x, (0, 2, 1, 3)), (n * kp, c, t))
    width = axial_stage(width, store, 'attention.width', groups, training)
    x = transpose(reshape(width, (n, kp, c, t)), (0, 2, 1, 3))
    height = reshape(transpose(x, (0, 3, 1, 2)), (n * t, c, kp))
    height = axial_stage(height, store, 'attention.height', groups, training)
    return transpose(reshape(height, (n, t, c, kp)), (0, 2, 3, 1))


def decoder(x: Tensor, store: ParameterStore, training: bool, trace: Optional[list] = None) -> Tensor:
    h = conv2d(x, store['decoder.conv.weight'], store['decoder.conv.bias'], padding=(1, 1))
    h = silu(batch_norm(h, store.bn('decoder.bn', training)))
    h = conv2d(h, store['decoder.head.weight'], store['decoder.head.bias'])
    _trace(trace, 'Decoder', h)
    pooled = adaptive_avg_pool_last(h)
    _trace(trace, 'Avg Pooling', pooled)
    n, two, kp, _ = pooled.shape
    return transpose(reshape(pooled, (n, two, kp)), (0, 2, 1))


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def _trace(trace: Optional[list], label: str, x: Tensor) -> None:
    if trace is not None:
        trace.append((label, tuple(x.shape[1:])))


def expected_shape_trace(config: WiFlowConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    T, K = config.window_T, config.keypoints
    rows = [('Input', (config.input_channels, T))]
    rows += [(f'TCN Layer {l + 1}', (c, T)) for l, c in enumerate(config.tcn_channel_schedule)]
    width = config.tcn_channel_schedule[-1]
    spatial = config.spatial_channel_schedule
    rows.append(('ConvBlock1 (up)', (spatial[0], T, width)))
    for n, c in enumerate(spatial, start=1):
        width //= 2
        rows.append((f'ResBlock {n}', (c, T, width)))
    rows += [('AxialAttention', (spatial[-1], K, T)), ('Decoder', (2, K, T)),
             ('Avg Pooling', (2, K, 1)), ('Output', (K, 2))]
    return rows


def format_shape_trace(trace: Sequence[Tuple[str, Tuple[int, ...]]]) -> str:
    return '\n'.join(f'{label:<18} {" x ".join(map(str, shape))}' for label, shape in trace)


def _as_input(window, store: ParameterStore) -> Tuple[Tensor, bool]:
    values = getattr(window, 'values', window)
    if isinstance(values, Tensor):
        x = values
    else:
        x = Tensor._wrap(np.asarray(values, dtype=store.dtype))
    config = store.config
    if x.ndim == 2:
        x, single = reshape(x, (1,) + x.shape), True
    else:
        single = False
    if x.ndim != 3 or x.shape[1:] != (config.input_channels, config.window_T):
        raise ShapeError(f'input must be {config.input_channels} x {config.window_T} '
                         f'(optionally batched), got {x.shape}')
    return x, single


def forward(window, store: ParameterStore, mode: str = 'eval', trace: Optional[list] = None) -> Tensor:
    """Map one window (C x T) or a batch (N x C x T) to K x 2 (or N x K x 2) coordinates.

    ``mode`` selects batch-norm behaviour: ``train`` uses batch statistics and
    updates the running ones, ``eval`` uses the running statistics.
    """
    if mode not in ('train', 'eval'):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == 'train'
    debug = env_flag('WIFLOW_DEBUG')
    if trace is None and debug:
        trace = []
    store.touched.clear()
    x, single = _as_input(window, store)
    _trace(trace, 'Input', x)
    x = tcn_encoder(x, store, trace)
    x = conv_block_up(spatial_reshape(x), store, training)
    _trace(trace, 'ConvBlock1 (up)', x)
    for n in range(1, len(store.config.spatial_channel_schedule) + 1):
        x = asym_res_block(x, store, f'spatial.res{n}', training)
        _trace(trace, f'ResBlock {n}', x)
    x = axial_attention(transpose(x, (0, 1, 3, 2)), store, training)
    _trace(trace, 'AxialAttention', x)
    out = decoder(x, store, training, trace)
    _trace(trace, 'Output', out)
    if debug:
        expected = expected_shape_trace(store.config)
        if trace != expected:
            raise ShapeError(f'shape trace mismatch:\n{format_shape_trace(trace)}\nexpected:\n'
                             f'{format_shape_trace(expected)}')
        unread = store.unread()
        if unread:
            raise ConfigError('model', f'forward left {len(unread)} entries unread: {unread[:5]}')
    return reshape(out, out.shape[1:]) if single else out


def predict(store: ParameterStore, windows: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode coordinates for an N x C x T array, without recording a graph."""
    if len(windows) == 0:
        return np.zeros((0, store.config.keypoints, 2), dtype=np.float32)
    outputs = []
    with no_grad():
        for start in range(0, len(windows), batch_size):
            outputs.append(forward(windows[start:start + batch_size], store, 'eval').data)
    return np.concatenate(outputs).astype(np.float32)
