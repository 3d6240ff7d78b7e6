"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Every primitive records a TapeNode linking the output to its inputs together
with the rule that maps the output gradient back onto the input gradients.
The tape is rebuilt on every forward pass and consumed by ``backward``.
Recording can be switched off with ``no_grad()`` for inference.

Also holds the SGD-with-momentum optimizer, which consumes the ``grad`` slots
that ``backward`` fills in.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError

Array = np.ndarray

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@dataclass
class TapeNode:
    """One recorded primitive application.

    ``backward`` maps the gradient at the output to one gradient per input
    (``None`` for inputs that do not receive gradient). Saved forward values
    live in the closure.
    """

    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[Array], tuple[Array | None, ...]]


class Tensor:
    """N-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "node")

    def __init__(self, data, node: TapeNode | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


def _result(op: str, out: Array, inputs: Sequence[Tensor], backward) -> Tensor:
    if _grad_enabled:
        return Tensor(out, TapeNode(op, tuple(inputs), backward))
    return Tensor(out)


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("elementwise_mul", a, b)
    ad, bd = a.data, b.data
    return _result("elementwise_mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def square(t: Tensor) -> Tensor:
    x = t.data
    return _result("square", x * x, (t,), lambda g: (2.0 * x * g,))


def add_scalar(t: Tensor, c: float) -> Tensor:
    return _result("add_scalar", t.data + c, (t,), lambda g: (g,))


def mul_scalar(t: Tensor, c: float) -> Tensor:
    return _result("mul_scalar", t.data * c, (t,), lambda g: (g * c,))


def rsub_scalar(c: float, t: Tensor) -> Tensor:
    """c - t, elementwise."""
    return _result("rsub_scalar", c - t.data, (t,), lambda g: (-g,))


def tsum(t: Tensor, axis: int | None = None) -> Tensor:
    """Sum over one axis, or over all elements when axis is None."""
    x = t.data

    if axis is None:
        def back(g: Array):
            return (np.broadcast_to(g, x.shape),)
    else:
        def back(g: Array):
            return (np.broadcast_to(np.expand_dims(g, axis), x.shape),)

    return _result("sum", x.sum(axis=axis), (t,), back)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(t: Tensor) -> Tensor:
    x = t.data
    return _result("relu", np.maximum(x, 0.0), (t,), lambda g: (g * (x > 0.0),))


# strict-open-interval clamp: float64 sigmoid saturates to exactly 0/1 past |x|~36
_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


def sigmoid(t: Tensor) -> Tensor:
    x = t.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    s = np.clip(s, _SIG_LO, _SIG_HI)
    return _result("sigmoid", s, (t,), lambda g: (g * s * (1.0 - s),))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x[B,I] @ weight[I,O] + bias[O]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeError(
            f"linear: expected ranks (2,2,1), got ({x.data.ndim},{weight.data.ndim},{bias.data.ndim})"
        )
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"linear: input axis 1 (={x.shape[1]}) must match weight axis 0 (={weight.shape[0]})"
        )
    if weight.shape[1] != bias.shape[0]:
        raise ShapeError(
            f"linear: weight axis 1 (={weight.shape[1]}) must match bias axis 0 (={bias.shape[0]})"
        )
    xd, wd = x.data, weight.data
    out = xd @ wd + bias.data

    def back(g: Array):
        return (g @ wd.T, xd.T @ g, g.sum(axis=0))

    return _result("linear", out, (x, weight, bias), back)


def _overlap(shift: int, n: int) -> tuple[slice, slice]:
    """dst and src slices such that dst[i] pairs with src[i] = dst[i] + shift."""
    dst = slice(max(0, -shift), n - max(0, shift))
    src = slice(max(0, shift), n - max(0, -shift))
    return dst, src


def _shifted_correlate(x: Array, weights: Array) -> Array:
    """Same-padded correlation out[b,k,i,j] = sum_cuv x[b,c,i+u-ph,j+v-pw] w[k,c,u,v].

    One GEMM over all kernel offsets, then shifted-slice accumulation; avoids
    building patch matrices, which dominates at small spatial extents.
    """
    b, c, h, w = x.shape
    k, _, kh, kw = weights.shape
    ph, pw = kh // 2, kw // 2
    x2 = x.transpose(1, 0, 2, 3).reshape(c, b * h * w)
    if kh == 1 and kw == 1:  # pure channel mixing
        out = (weights.reshape(k, c) @ x2).reshape(k, b, h, w)
        return np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    wall = weights.transpose(2, 3, 0, 1).reshape(kh * kw * k, c)
    prod = (wall @ x2).reshape(kh, kw, k, b, h, w)
    acc = np.zeros((k, b, h, w))
    for u in range(kh):
        di, si = _overlap(u - ph, h)
        for v in range(kw):
            dj, sj = _overlap(v - pw, w)
            acc[:, :, di, dj] += prod[u, v][:, :, si, sj]
    return np.ascontiguousarray(acc.transpose(1, 0, 2, 3))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Same-padded stride-1 cross-correlation: x[B,C,H,W], kernel[K,C,kh,kw] -> [B,K,H,W]."""
    if x.data.ndim != 4 or kernel.data.ndim != 4 or bias.data.ndim != 1:
        raise ShapeError(
            f"conv2d: expected ranks (4,4,1), got ({x.data.ndim},{kernel.data.ndim},{bias.data.ndim})"
        )
    kk, kc, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"conv2d: kernel extents must be odd for same padding, got {kh}x{kw}")
    if x.shape[1] != kc:
        raise ShapeError(
            f"conv2d: input axis 1 (={x.shape[1]}) must match kernel axis 1 (={kc})"
        )
    if bias.shape[0] != kk:
        raise ShapeError(
            f"conv2d: bias axis 0 (={bias.shape[0]}) must match kernel axis 0 (={kk})"
        )
    b, c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    out = _shifted_correlate(x.data, kernel.data) + bias.data[None, :, None, None]

    def back(g: Array):
        db = g.sum(axis=(0, 2, 3))
        # dx correlates g with the kernel flipped spatially and transposed on (K,C)
        kflip = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        dx = _shifted_correlate(g, kflip)
        # dk[k,c,u,v] pairs g at (i,j) with x at (i+u-ph, j+v-pw)
        dk = np.empty((kk, kc, kh, kw))
        xd = x.data
        for u in range(kh):
            di, si = _overlap(u - ph, h)
            for v in range(kw):
                dj, sj = _overlap(v - pw, w)
                dk[:, :, u, v] = np.tensordot(
                    g[:, :, di, dj], xd[:, :, si, sj], axes=([0, 2, 3], [0, 2, 3])
                )
        return (dx, dk, db)

    return _result("conv2d", out, (x, kernel, bias), back)


def max_pool2d(t: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties go to the first window element."""
    if t.data.ndim != 4:
        raise ShapeError(f"max_pool2d: expected rank 4, got {t.data.ndim}")
    b, c, h, w = t.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2d: spatial axes ({h},{w}) must be even")
    h2, w2 = h // 2, w // 2
    win = t.data.reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2, w2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back(g: Array):
        dwin = np.zeros((b, c, h2, w2, 4))
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return (dx,)

    return _result("max_pool2d", out, (t,), back)


def global_avg_pool(t: Tensor) -> Tensor:
    """[B,C,H,W] -> [B,C], mean over the spatial axes."""
    if t.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected rank 4, got {t.data.ndim}")
    b, c, h, w = t.shape
    out = t.data.mean(axis=(2, 3))

    def back(g: Array):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (b, c, h, w)),)

    return _result("global_avg_pool", out, (t,), back)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    first = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(first):
            raise ShapeError(f"concat: rank mismatch {len(first)} vs {len(t.shape)}")
        for ax, (da, db) in enumerate(zip(first, t.shape)):
            if ax != axis % len(first) and da != db:
                raise ShapeError(f"concat: axis {ax} differs ({da} vs {db}) among operands")
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def back(g: Array):
        return tuple(np.split(g, splits, axis=axis))

    return _result("concat", out, tuple(tensors), back)


def l2_normalize(t: Tensor, epsilon: float = 1e-12) -> Tensor:
    """Scale rows (last axis) to unit Euclidean norm; norms <= epsilon divide by epsilon."""
    if epsilon <= 0:
        raise ValueError(f"l2_normalize: epsilon must be positive, got {epsilon}")
    x = t.data
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, epsilon)
    y = x / denom

    def back(g: Array):
        inner = (g * y).sum(axis=-1, keepdims=True)
        dx = np.where(norm > epsilon, (g - y * inner) / denom, g / denom)
        return (dx,)

    return _result("l2_normalize", y, (t,), back)


def gather_rows(t: Tensor, indices) -> Tensor:
    """Select rows along axis 0; gradient scatter-adds back into place."""
    idx = np.asarray(indices, dtype=np.intp)
    x = t.data
    out = x[idx]

    def back(g: Array):
        dx = np.zeros_like(x)
        np.add.at(dx, idx, g)
        return (dx,)

    return _result("gather_rows", out, (t,), back)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor reachable from ``loss``; consume the tape.

    ``loss`` must be a scalar produced by taped primitives. Gradients are
    overwritten, not accumulated across calls.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            topo.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                stack.append((inp, False))

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(topo):
        g = grads.get(id(t))
        if g is None or t.node is None:
            continue
        for inp, gi in zip(t.node.inputs, t.node.backward(g)):
            if gi is None:
                continue
            acc = grads.get(id(inp))
            grads[id(inp)] = gi if acc is None else acc + gi

    for t in topo:
        g = grads.get(id(t))
        if g is not None:
            t.grad = np.ascontiguousarray(g)
        t.node = None  # tape consumed


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Classic (non-Nesterov) momentum state, one velocity buffer per parameter."""

    learning_rate: float
    momentum: float = 0.9
    velocity: dict[str, Array] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0,1), got {self.momentum}")


def sgd_momentum_step(params: dict[str, Tensor], state: OptimizerState) -> None:
    """v <- momentum*v + grad; p <- p - lr*v, in place, for every named parameter."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"sgd_momentum_step: parameter {name!r} has no gradient")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.data.shape:
            raise ShapeError(
                f"sgd_momentum_step: velocity shape {v.shape} does not match parameter "
                f"{name!r} shape {p.data.shape}"
            )
        v = state.momentum * v + p.grad
        state.velocity[name] = v
        p.data -= state.learning_rate * v
