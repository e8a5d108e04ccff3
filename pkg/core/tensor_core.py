"""
Dense-tensor engine with eager reverse-mode automatic differentiation.

Only the operations the pose network needs are provided: dilated causal
1-D convolution, 2-D convolution, batch normalization, SiLU / sigmoid /
softmax, matmul and data-reordering ops, reductions, adaptive average
pooling, the Smooth-L1 kernel and a row-wise Euclidean norm.

Every op records a node on the output tensor (when gradients are enabled
and an input requires them). ``backward`` orders the recorded nodes
topologically from the loss, walks them in reverse, accumulates gradients
on leaves and then releases the graph.

Precision: tensors are 32-bit by default. ``precision(64)`` switches the
default to 64-bit; it exists for finite-difference gradient checks.
Reductions and batch statistics always accumulate in 64-bit.
"""
import contextlib
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from core.errors import ShapeError

ArrayLike = Union['Tensor', np.ndarray, float, int, Sequence]

_STATE = {'dtype': np.float32, 'grad_enabled': True}


# ---------------------------------------------------------------------------
# Global modes
# ---------------------------------------------------------------------------

def default_dtype():
    return _STATE['dtype']


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the default floating width (32 or 64)."""
    if bits not in (32, 64):
        raise ValueError(f'precision must be 32 or 64, got {bits}')
    previous = _STATE['dtype']
    _STATE['dtype'] = np.float64 if bits == 64 else np.float32
    try:
        yield
    finally:
        _STATE['dtype'] = previous


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (eval forwards, finite differences)."""
    previous = _STATE['grad_enabled']
    _STATE['grad_enabled'] = False
    try:
        yield
    finally:
        _STATE['grad_enabled'] = previous


def grad_enabled() -> bool:
    return _STATE['grad_enabled']


# ---------------------------------------------------------------------------
# Tensor and graph nodes
# ---------------------------------------------------------------------------

@dataclass
class Node:
    """One recorded op: its name, inputs and the vector-Jacobian product."""
    op: str
    inputs: Tuple['Tensor', ...]
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Row-major real array with an optional gradient.

    The array is not modified after construction; only ``grad`` changes.
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        self.data = np.array(data, dtype=dtype or default_dtype(), copy=True)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> 'Tensor':
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out.name = None
        out._node = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f'item() needs a single element, got shape {self.shape}')
        return float(self.data.reshape(-1)[0])

    def detach(self) -> 'Tensor':
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ', requires_grad=True' if self.requires_grad else ''
        return f'Tensor(shape={self.shape}, dtype={self.dtype}{flag})'

    # arithmetic
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError('division is only defined by a constant')
        return scale(self, 1.0 / float(other))

    def sum(self, axis=None, keepdims: bool = False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims: bool = False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)


def as_tensor(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else default_dtype()
    return Tensor._wrap(np.asarray(value, dtype=dtype))


def _record(data: np.ndarray, op: str, inputs: Sequence[Optional[Tensor]], vjp) -> Tensor:
    out = Tensor._wrap(data)
    parents = tuple(inputs)
    if grad_enabled() and any(p is not None and p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(op, parents, vjp)
    return out


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def build_tape(loss: Tensor) -> List[Tensor]:
    """Recorded tensors reachable from ``loss``, every input before its consumer."""
    order: List[Tensor] = []
    seen = set()
    stack: List[Tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in seen:
            continue
        seen.add(id(tensor))
        stack.append((tensor, True))
        if tensor._node is not None:
            for parent in tensor._node.inputs:
                if parent is not None and parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from a scalar loss.

    Gradients accumulate across uses of a leaf and across calls. The graph is
    released afterwards.
    """
    if loss.data.size != 1:
        raise ShapeError(f'backward needs a scalar loss, got shape {loss.shape}')
    if not loss.requires_grad:
        return
    tape = build_tape(loss)
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for tensor in reversed(tape):
        grad = pending.pop(id(tensor), None)
        if grad is None:
            continue
        if tensor._node is None:
            grad = np.asarray(grad, dtype=tensor.dtype).reshape(tensor.shape)
            tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
            continue
        node = tensor._node
        for parent, parent_grad in zip(node.inputs, node.vjp(grad)):
            if parent is None or parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad
    for tensor in tape:
        tensor._node = None


# ---------------------------------------------------------------------------
# Elementwise and linear algebra
# ---------------------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f'{op}: incompatible shapes {a.shape} and {b.shape}') from None


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b, 'add')

    def vjp(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)

    return _record(a.data + b.data, 'add', (a, b), vjp)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b, 'sub')

    def vjp(grad):
        return _unbroadcast(grad, a.shape), -_unbroadcast(grad, b.shape)

    return _record(a.data - b.data, 'sub', (a, b), vjp)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b, 'mul')

    def vjp(grad):
        return _unbroadcast(grad * b.data, a.shape), _unbroadcast(grad * a.data, b.shape)

    return _record(a.data * b.data, 'mul', (a, b), vjp)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _record(x.data * x.dtype.type(factor), 'scale', (x,), lambda grad: (grad * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (leading axes broadcast)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f'matmul: incompatible shapes {a.shape} and {b.shape}')
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f'matmul: incompatible shapes {a.shape} and {b.shape}') from None

    def vjp(grad):
        ga = np.matmul(grad, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), grad)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, 'matmul', (a, b), vjp)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f'transpose: axes {axes} do not permute shape {x.shape}')
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), 'transpose', (x,), lambda grad: (np.transpose(grad, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f'reshape: cannot view shape {x.shape} as {shape}') from None
    original = x.shape
    return _record(out, 'reshape', (x,), lambda grad: (grad.reshape(original),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError('concat: no tensors given')
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ', '.join(str(t.shape) for t in tensors)
        raise ShapeError(f'concat along axis {axis}: incompatible shapes {shapes}') from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(grad):
        return tuple(np.split(grad, bounds, axis=axis))

    return _record(out, 'concat', tuple(tensors), vjp)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)
    shape = x.shape

    def vjp(grad):
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, shape),)

    return _record(np.asarray(out), 'sum', (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise ShapeError(f'mean over an empty extent of shape {x.shape}')
    return scale(sum_(x, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# Activations and pointwise kernels
# ---------------------------------------------------------------------------

def _sigmoid64(values: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * values.astype(np.float64)))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid64(x.data)

    def vjp(grad):
        return ((grad * s * (1.0 - s)).astype(x.dtype),)

    return _record(s.astype(x.dtype), 'sigmoid', (x,), vjp)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid64(x.data)
    x64 = x.data.astype(np.float64)

    def vjp(grad):
        return ((grad * (s + x64 * s * (1.0 - s))).astype(x.dtype),)

    return _record((x64 * s).astype(x.dtype), 'silu', (x,), vjp)


def softmax(x: Tensor, axis: int) -> Tensor:
    shifted = x.data.astype(np.float64) - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(grad):
        g = grad.astype(np.float64)
        return ((y * (g - np.sum(g * y, axis=axis, keepdims=True))).astype(x.dtype),)

    return _record(y.astype(x.dtype), 'softmax', (x,), vjp)


def smooth_l1(x: Tensor, beta: float) -> Tensor:
    """Elementwise 0.5 x^2 / beta below beta, |x| - 0.5 beta above."""
    if beta <= 0:
        raise ValueError(f'beta must be positive, got {beta}')
    x64 = x.data.astype(np.float64)
    ax = np.abs(x64)
    inner = ax < beta
    y = np.where(inner, 0.5 * x64 * x64 / beta, ax - 0.5 * beta)

    def vjp(grad):
        slope = np.where(inner, x64 / beta, np.sign(x64))
        return ((grad * slope).astype(x.dtype),)

    return _record(y.astype(x.dtype), 'smooth_l1', (x,), vjp)


def vector_norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is zero."""
    x64 = x.data.astype(np.float64)
    n = np.sqrt(np.sum(x64 * x64, axis=axis))

    def vjp(grad):
        safe = np.where(n > 0, n, 1.0)
        unit = x64 / np.expand_dims(safe, axis)
        unit = np.where(np.expand_dims(n > 0, axis), unit, 0.0)
        return ((np.expand_dims(grad, axis) * unit).astype(x.dtype),)

    return _record(n.astype(x.dtype), 'vector_norm', (x,), vjp)


def adaptive_avg_pool_last(x: Tensor) -> Tensor:
    """Mean over the last axis, kept as an extent-1 axis."""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f'adaptive_avg_pool_last needs a non-empty last axis, got {x.shape}')
    return mean(x, axis=x.ndim - 1, keepdims=True)


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------

def _batched(x: Tensor, ndim: int) -> Tuple[Tensor, bool]:
    if x.ndim == ndim - 1:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != ndim:
        raise ShapeError(f'expected a {ndim - 1}-D or batched {ndim}-D input, got shape {x.shape}')
    return x, False


def dilated_causal_conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                          dilation: int = 1, groups: int = 1) -> Tensor:
    """Grouped dilated causal convolution over the time axis.

    ``out[c, s] = bias[c] + sum_i w[c, :, i] . x[:, s - dilation * i]`` with
    ``x`` zero for negative time, so tap ``i`` looks ``i * dilation`` steps
    back. Input ``C_in x T`` or ``N x C_in x T``; weight ``C_out x C_in/g x k``.
    """
    x, unbatched = _batched(x, 3)
    n, c_in, steps = x.shape
    if weight.ndim != 3:
        raise ShapeError(f'conv1d weight must be C_out x C_in/g x k, got {weight.shape}')
    c_out, c_per, k = weight.shape
    if groups < 1 or c_in % groups or c_out % groups:
        raise ShapeError(f'conv1d: groups={groups} must divide C_in={c_in} and C_out={c_out}')
    if c_per != c_in // groups:
        raise ShapeError(f'conv1d: weight {weight.shape} expects {c_per * groups} input channels, input has {c_in}')
    if dilation < 1 or k < 1:
        raise ShapeError(f'conv1d: dilation and kernel must be >= 1, got d={dilation} k={k}')
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f'conv1d: bias shape {bias.shape} does not match C_out={c_out}')

    pad = (k - 1) * dilation
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, 0)))
    taps = np.stack([xp[:, :, pad - i * dilation: pad - i * dilation + steps] for i in range(k)], axis=2)
    per_out = c_out // groups
    cols = taps.reshape(n, groups, c_per, k, steps).transpose(1, 2, 3, 0, 4).reshape(groups, c_per * k, n * steps)
    w_g = weight.data.reshape(groups, per_out, c_per * k)
    out = np.matmul(w_g, cols).reshape(groups, per_out, n, steps).transpose(2, 0, 1, 3).reshape(n, c_out, steps)
    if bias is not None:
        out = out + bias.data[None, :, None]

    def vjp(grad):
        g_g = grad.reshape(n, groups, per_out, steps).transpose(1, 2, 0, 3).reshape(groups, per_out, n * steps)
        g_w = np.matmul(g_g, cols.transpose(0, 2, 1)).reshape(weight.shape)
        g_cols = np.matmul(w_g.transpose(0, 2, 1), g_g)
        g_cols = g_cols.reshape(groups, c_per, k, n, steps).transpose(3, 0, 1, 2, 4).reshape(n, c_in, k, steps)
        g_xp = np.zeros_like(xp, dtype=g_cols.dtype)
        for i in range(k):
            start = pad - i * dilation
            g_xp[:, :, start:start + steps] += g_cols[:, :, i, :]
        g_b = grad.sum(axis=(0, 2)) if bias is not None else None
        return g_xp[:, :, pad:], g_w, g_b

    out = _record(out, 'dilated_causal_conv1d', (x, weight, bias), vjp)
    return reshape(out, out.shape[1:]) if unbatched else out


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: Tuple[int, int] = (1, 1), padding: Tuple[int, int] = (0, 0)) -> Tensor:
    """Cross-correlation of ``C_in x H x W`` (or batched) with ``C_out x C_in x kh x kw``."""
    x, unbatched = _batched(x, 4)
    n, c_in, height, width = x.shape
    if weight.ndim != 4 or weight.shape[1] != c_in:
        raise ShapeError(f'conv2d: weight {weight.shape} does not match input channels {c_in}')
    c_out, _, kh, kw = weight.shape
    sh, sw = stride
    ph, pw = padding
    h_out = (height + 2 * ph - kh) // sh + 1
    w_out = (width + 2 * pw - kw) // sw + 1
    if h_out <= 0 or w_out <= 0 or sh < 1 or sw < 1:
        raise ShapeError(f'conv2d: non-positive output extent {h_out}x{w_out} for input {x.shape}, '
                         f'kernel {kh}x{kw}, stride {stride}, padding {padding}')
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f'conv2d: bias shape {bias.shape} does not match C_out={c_out}')

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :h_out, :w_out]
    cols = windows.transpose(1, 4, 5, 0, 2, 3).reshape(c_in * kh * kw, n * h_out * w_out)
    w2 = weight.data.reshape(c_out, -1)
    out = np.matmul(w2, cols).reshape(c_out, n, h_out, w_out).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def vjp(grad):
        g2 = grad.transpose(1, 0, 2, 3).reshape(c_out, -1)
        g_w = np.matmul(g2, cols.T).reshape(weight.shape)
        g_cols = np.matmul(w2.T, g2).reshape(c_in, kh, kw, n, h_out, w_out)
        g_xp = np.zeros(xp.shape, dtype=g_cols.dtype)
        for i in range(kh):
            for j in range(kw):
                g_xp[:, :, i:i + sh * (h_out - 1) + 1:sh, j:j + sw * (w_out - 1) + 1:sw] += \
                    g_cols[:, i, j].transpose(1, 0, 2, 3)
        g_b = grad.sum(axis=(0, 2, 3)) if bias is not None else None
        return g_xp[:, :, ph:ph + height, pw:pw + width], g_w, g_b

    out = _record(np.ascontiguousarray(out), 'conv2d', (x, weight, bias), vjp)
    return reshape(out, out.shape[1:]) if unbatched else out


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Affine parameters plus running statistics of one batch-norm layer.

    ``running_mean`` / ``running_var`` are updated in place by train-mode
    forwards, so a state built over a store's buffers writes through to it.
    They share the dtype of the affine parameters.
    """
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    training: bool = True

    @classmethod
    def create(cls, channels: int, dtype=None) -> 'BatchNormState':
        dtype = dtype or default_dtype()
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True, dtype=dtype),
            beta=Tensor(np.zeros(channels), requires_grad=True, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )


def batch_norm(x: Tensor, state: BatchNormState) -> Tensor:
    """Normalize per channel (axis 1 of a batched input, axis 0 otherwise)."""
    if state.epsilon <= 0:
        raise ValueError('batch_norm epsilon must be positive')
    channel_axis = 1 if x.ndim >= 3 else 0
    channels = x.shape[channel_axis]
    if state.gamma.shape != (channels,):
        raise ShapeError(f'batch_norm: {channels} channels but gamma has shape {state.gamma.shape}')
    axes = tuple(a for a in range(x.ndim) if a != channel_axis)
    bshape = [1] * x.ndim
    bshape[channel_axis] = channels
    count = x.size // channels

    x64 = x.data.astype(np.float64)
    if state.training:
        mu = x64.mean(axis=axes)
        var = x64.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        state.running_mean[...] = (1.0 - state.momentum) * state.running_mean + state.momentum * mu
        state.running_var[...] = (1.0 - state.momentum) * state.running_var + state.momentum * unbiased
    else:
        mu = state.running_mean
        var = state.running_var
    inv = (1.0 / np.sqrt(var + state.epsilon)).reshape(bshape)
    xhat = (x64 - mu.reshape(bshape)) * inv
    gamma = state.gamma.data.astype(np.float64).reshape(bshape)
    out_dtype = np.result_type(x.dtype, state.gamma.dtype)
    y = gamma * xhat + state.beta.data.astype(np.float64).reshape(bshape)
    training = state.training

    def vjp(grad):
        g = grad.astype(np.float64)
        g_beta = g.sum(axis=axes)
        g_gamma = (g * xhat).sum(axis=axes)
        dxhat = g * gamma
        if training:
            g_x = inv / count * (count * dxhat
                                 - dxhat.sum(axis=axes, keepdims=True)
                                 - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            g_x = dxhat * inv
        return (g_x.astype(x.dtype), g_gamma.astype(state.gamma.dtype), g_beta.astype(state.beta.dtype))

    return _record(y.astype(out_dtype), 'batch_norm', (x, state.gamma, state.beta), vjp)


# ---------------------------------------------------------------------------
# Initialization and gradient checking
# ---------------------------------------------------------------------------

def uniform_init(rng: np.random.Generator, shape: Sequence[int], fan_in: int, dtype=None) -> Tensor:
    """Leaf drawn uniform in +-sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    values = rng.uniform(-bound, bound, size=tuple(shape))
    return Tensor(values, requires_grad=True, dtype=dtype)


def zeros_param(shape: Sequence[int], dtype=None) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=True, dtype=dtype)


def grad_check_per_input(closure: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
                         max_entries: Optional[int] = None, seed: int = 0) -> List[float]:
    """Worst relative error per input between autodiff and central differences.

    Finite differences run on 64-bit copies of the inputs; ``max_entries``
    samples that many entries per input instead of visiting all of them.
    """
    if eps <= 0:
        raise ValueError('eps must be positive')
    for tensor in inputs:
        tensor.grad = None
        tensor.requires_grad = True
    loss = closure(*inputs)
    backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in inputs]

    rng = np.random.default_rng(seed)
    copies = [Tensor(t.data, dtype=np.float64) for t in inputs]
    errors = []
    with no_grad(), precision(64):
        for copy, exact in zip(copies, analytic):
            flat = copy.data.reshape(-1)
            exact_flat = exact.reshape(-1)
            if max_entries is not None and flat.size > max_entries:
                entries = rng.choice(flat.size, size=max_entries, replace=False)
            else:
                entries = range(flat.size)
            worst = 0.0
            for e in entries:
                saved = flat[e]
                flat[e] = saved + eps
                f_plus = closure(*copies).item()
                flat[e] = saved - eps
                f_minus = closure(*copies).item()
                flat[e] = saved
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a = exact_flat[e]
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
            errors.append(worst)
    return errors


def grad_check(closure: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               max_entries: Optional[int] = None, seed: int = 0) -> float:
    """Max over all checked entries of |analytic - numeric| / max(1, |analytic|)."""
    errors = grad_check_per_input(closure, inputs, eps, max_entries, seed)
    return max(errors) if errors else 0.0
