"""
Minimal dense-tensor numerics with tape-based reverse-mode differentiation.

Every op takes and returns Tensor objects holding row-major float64 arrays.
When a Tape is active (``with Tape() as tape:``) and at least one input
requires a gradient, the op records a backward rule; otherwise nothing is
recorded. Shapes are always explicit: there is no implicit broadcasting.
"""

import contextvars
import itertools
import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from config import BN_EPS, BN_MOMENTUM, LEAKY_SLOPE
from errors import ConfigError, ShapeError

# =============================================================================
# Tensor and Tape
# =============================================================================


class Tensor:
    """Immutable float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


_ACTIVE_TAPE: contextvars.ContextVar = contextvars.ContextVar("active_tape", default=None)


class Tape:
    """Ordered record of differentiable ops; single writer."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._tokens: list = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()

    def backward(self, root, grad=None) -> None:
        """
        Reverse sweep over the recorded ops.

        ``root`` is either a single output tensor (scalar unless ``grad`` is
        given) or a list of ``(tensor, grad)`` seeds; seeds with ``None``
        gradient must be scalars. Gradients accumulate into ``.grad``.
        """
        seeds = root if isinstance(root, (list, tuple)) else [(root, grad)]
        for tensor, seed in seeds:
            if seed is None:
                if tensor.size != 1:
                    raise ShapeError(f"Implicit gradient needs a scalar output, got {tensor.shape}")
                seed = np.ones_like(tensor.data)
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != tensor.shape:
                raise ShapeError(f"Seed gradient {seed.shape} does not match output {tensor.shape}")
            _accumulate(tensor, seed)

        for node in reversed(self.nodes):
            upstream = node.output.grad
            if upstream is None:
                continue
            for tensor, g in zip(node.inputs, node.backward(upstream)):
                if g is not None and tensor.requires_grad:
                    _accumulate(tensor, g)


def _accumulate(tensor: Tensor, g: np.ndarray) -> None:
    tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


@contextmanager
def no_grad():
    """Evaluate forward-only: nothing is recorded inside the block."""
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def _emit(op: str, inputs: Tuple[Tensor, ...], data: np.ndarray, backward) -> Tensor:
    out = Tensor(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(op, inputs, out, backward))
    return out


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# =============================================================================
# Elementwise and Reductions
# =============================================================================


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    return _emit("div", (a, b), ad / bd, lambda g: (g / bd, -g * ad / (bd * bd)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("add_scalar", (a,), a.data + c, lambda g: (g,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _emit("square", (a,), ad * ad, lambda g: (2.0 * g * ad,))


def total(a: Tensor) -> Tensor:
    """Sum of all elements, returned as a 0-d tensor."""
    shape = a.shape
    return _emit("sum", (a,), np.array(a.data.sum()),
                 lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _emit("mean", (a,), np.array(a.data.sum() / n),
                 lambda g: (np.full(shape, float(g) / n),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if math.prod(shape) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _emit("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    rest = [t.shape[:axis] + t.shape[axis + 1:] for t in tensors]
    if any(r != rest[0] for r in rest):
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _emit("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis), backward)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    return concat([reshape(t, (1,) + t.shape) for t in tensors], axis=0)


def take(a: Tensor, index: int) -> Tensor:
    """Sub-array ``a[index]`` along the leading axis."""
    if not 0 <= index < a.shape[0]:
        raise ShapeError(f"take: index {index} outside [0, {a.shape[0]})")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _emit("take", (a,), a.data[index].copy(), backward)


# =============================================================================
# Linear Algebra
# =============================================================================


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row bias: x[m, n] + b[n]."""
    if x.data.ndim != 2 or b.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: bias {b.shape} does not fit {x.shape}")
    return _emit("add_bias", (x, b), x.data + b.data[None, :], lambda g: (g, g.sum(axis=0)))


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Channel bias: x[c, ...] + b[c]."""
    if b.shape != (x.shape[0],):
        raise ShapeError(f"add_channel_bias: bias {b.shape} does not fit {x.shape}")
    expand = (slice(None),) + (None,) * (x.data.ndim - 1)
    axes = tuple(range(1, x.data.ndim))
    return _emit("add_channel_bias", (x, b), x.data + b.data[expand], lambda g: (g, g.sum(axis=axes)))


def linear_op(x: Tensor, forward: Callable, adjoint: Callable, op: str = "linear") -> Tensor:
    """Wrap a linear map and its exact adjoint as a differentiable op."""
    return _emit(op, (x,), forward(x.data), lambda g: (adjoint(g),))


def _apply_separable(data: np.ndarray, mats: Sequence[Optional[np.ndarray]]) -> np.ndarray:
    out = data
    for axis, m in enumerate(mats):
        if m is None:
            continue
        out = np.moveaxis(np.tensordot(m, out, axes=(1, axis)), 0, axis)
    return out


def separable(x: Tensor, mats: Sequence[Optional[np.ndarray]]) -> Tensor:
    """Apply one matrix per axis (``None`` keeps the axis); adjoint uses the transposes."""
    if len(mats) != x.data.ndim:
        raise ShapeError(f"separable: {len(mats)} matrices for rank {x.data.ndim}")
    for axis, m in enumerate(mats):
        if m is not None and m.shape[1] != x.shape[axis]:
            raise ShapeError(f"separable: matrix {m.shape} does not fit axis {axis} of {x.shape}")
    transposed = [None if m is None else m.T for m in mats]
    return _emit("separable", (x,), _apply_separable(x.data, mats),
                 lambda g: (_apply_separable(g, transposed),))


# =============================================================================
# Activations
# =============================================================================


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope)
    return _emit("leaky_relu", (x,), x.data * factor, lambda g: (g * factor,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _emit("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


class BatchNormStats:
    """Running statistics of one batchnorm layer (not differentiable state)."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, stats: Optional[BatchNormStats] = None,
              training: bool = True, eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> Tensor:
    """
    Per-channel normalization of x[c, ...] over the remaining axes.

    Training mode normalizes with the batch statistics and updates ``stats``;
    eval mode uses ``stats``. A channel with zero batch variance yields beta.
    """
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: affine params {gamma.shape}/{beta.shape} for {c} channels")
    if eps <= 0:
        raise ConfigError("batchnorm epsilon must be positive")
    flat = x.data.reshape(c, -1)
    n = flat.shape[1]
    g_vec, b_vec = gamma.data, beta.data

    if training:
        mu = flat.mean(axis=1)
        centered = flat - mu[:, None]
        var = (centered * centered).mean(axis=1)
        inv = np.where(var > 0, 1.0 / np.sqrt(var + eps), 0.0)
        if stats is not None:
            unbiased = var * n / max(n - 1, 1)
            stats.mean = (1 - momentum) * stats.mean + momentum * mu
            stats.var = (1 - momentum) * stats.var + momentum * unbiased
    else:
        if stats is None:
            raise ConfigError("batchnorm eval mode needs running statistics")
        centered = flat - stats.mean[:, None]
        inv = 1.0 / np.sqrt(stats.var + eps)
    xhat = centered * inv[:, None]
    out = (g_vec[:, None] * xhat + b_vec[:, None]).reshape(x.shape)

    def backward(g):
        gf = g.reshape(c, -1)
        dgamma = (gf * xhat).sum(axis=1)
        dbeta = gf.sum(axis=1)
        dxhat = gf * g_vec[:, None]
        if training:
            dx = inv[:, None] / n * (n * dxhat - dxhat.sum(axis=1, keepdims=True)
                                      - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
        else:
            dx = dxhat * inv[:, None]
        return dx.reshape(x.shape), dgamma, dbeta

    return _emit("batchnorm", (x, gamma, beta), out, backward)


# =============================================================================
# Convolution, Resampling, Pooling
# =============================================================================


def _im2col(padded: np.ndarray, spatial: Tuple[int, ...]) -> np.ndarray:
    c = padded.shape[0]
    offsets = list(itertools.product(range(3), repeat=len(spatial)))
    cols = np.empty((c, len(offsets), math.prod(spatial)))
    for k, offset in enumerate(offsets):
        window = (slice(None),) + tuple(slice(o, o + n) for o, n in zip(offset, spatial))
        cols[:, k, :] = padded[window].reshape(c, -1)
    return cols.reshape(c * len(offsets), -1)


def _col2im(dcols: np.ndarray, c: int, spatial: Tuple[int, ...]) -> np.ndarray:
    nd = len(spatial)
    offsets = list(itertools.product(range(3), repeat=nd))
    dpad = np.zeros((c,) + tuple(n + 2 for n in spatial))
    dcols = dcols.reshape(c, len(offsets), -1)
    for k, offset in enumerate(offsets):
        window = (slice(None),) + tuple(slice(o, o + n) for o, n in zip(offset, spatial))
        dpad[window] += dcols[:, k, :].reshape((c,) + spatial)
    return dpad[(slice(None),) + (slice(1, -1),) * nd]


def _conv(op: str, x: Tensor, w: Tensor, nd: int, stride: int, pad: int) -> Tensor:
    if stride != 1 or pad != 1:
        raise ConfigError(f"{op}: only stride=1, pad=1 is supported (got stride={stride}, pad={pad})")
    if w.data.ndim != nd + 2 or w.shape[2:] != (3,) * nd:
        raise ConfigError(f"{op}: only 3-wide kernels are supported, got weight {w.shape}")
    if x.data.ndim != nd + 1 or x.shape[0] != w.shape[1]:
        raise ShapeError(f"{op}: input {x.shape} does not match weight {w.shape}")
    c_out, c_in = w.shape[:2]
    spatial = x.shape[1:]
    if min(spatial) < 1:
        raise ShapeError(f"{op}: empty spatial extent {spatial}")
    padded = np.pad(x.data, [(0, 0)] + [(1, 1)] * nd)
    cols = _im2col(padded, spatial)
    wm = w.data.reshape(c_out, -1)
    out = (wm @ cols).reshape((c_out,) + spatial)

    def backward(g):
        gm = g.reshape(c_out, -1)
        dw = (gm @ cols.T).reshape(w.shape)
        dx = _col2im(wm.T @ gm, c_in, spatial)
        return dx, dw

    return _emit(op, (x, w), out, backward)


def conv3d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    """Same-size 3x3x3 cross-correlation with zero padding: x[c_in, D, H, W]."""
    return _conv("conv3d", x, w, 3, stride, pad)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    """Same-size 3x3 cross-correlation with zero padding: x[c_in, H, W]."""
    return _conv("conv2d", x, w, 2, stride, pad)


def upsample_nn(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of every spatial axis of x[c, ...]."""
    if factor not in (2, 4):
        raise ConfigError(f"upsample_nn: factor must be 2 or 4, got {factor}")
    c, spatial = x.shape[0], x.shape[1:]
    out = x.data
    for axis in range(1, x.data.ndim):
        out = np.repeat(out, factor, axis=axis)

    def backward(g):
        blocks = [c]
        for n in spatial:
            blocks += [n, factor]
        return (g.reshape(blocks).sum(axis=tuple(range(2, 2 * len(spatial) + 1, 2))),)

    return _emit("upsample_nn", (x,), out, backward)


def avg_pool(x: Tensor, factor: int = 2) -> Tensor:
    """Non-overlapping mean pooling of every spatial axis of x[c, ...]."""
    c, spatial = x.shape[0], x.shape[1:]
    if any(n % factor for n in spatial):
        raise ShapeError(f"avg_pool: extents {spatial} not divisible by {factor}")
    blocks = [c]
    for n in spatial:
        blocks += [n // factor, factor]
    axes = tuple(range(2, 2 * len(spatial) + 1, 2))
    count = factor ** len(spatial)
    out = x.data.reshape(blocks).mean(axis=axes)

    def backward(g):
        full = g / count
        for axis in range(1, g.ndim):
            full = np.repeat(full, factor, axis=axis)
        return (full,)

    return _emit("avg_pool", (x,), out, backward)


# =============================================================================
# Fused Losses
# =============================================================================


def bce_with_logits(logits: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy on logits (numerically stable)."""
    _same_shape("bce_with_logits", logits, target)
    z, t = logits.data, target.data
    n = z.size
    loss = (np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))).sum() / n
    p = _sigmoid(z)
    return _emit("bce_with_logits", (logits, target), np.array(loss),
                 lambda g: (float(g) * (p - t) / n, float(g) * (-z) / n))
