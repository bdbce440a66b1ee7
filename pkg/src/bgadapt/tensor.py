"""Dense numpy-backed tensors with reverse-mode differentiation.

Every operation records its parents and a closure mapping the output
gradient to parent gradients. ``Tensor.backward`` replays the recorded
operations in reverse creation order, so a tensor used on several paths
receives the sum of all contributions.

Broadcasting is restricted to exact shape matches and scalar-vs-tensor.
Spatial ops accept ``C x H x W`` or batched ``N x C x H x W`` arrays.
"""

from __future__ import annotations

import itertools
import threading
import warnings
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
LOG_EPS = 1e-12

_seq = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input lies outside the domain of an operation."""


class EmptyMaskWarning(RuntimeWarning):
    """A masked reduction saw no selected elements and returned 0."""


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_seq)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self, grad=None) -> None:
        backward(self, grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tracked tensor reached."""
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)
    if not loss.requires_grad:
        return

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in nodes:
            continue
        nodes[id(node)] = node
        stack.extend(p for p in node._parents if p.requires_grad and id(p) not in nodes)

    pending: dict[int, np.ndarray] = {id(loss): grad}
    for node in sorted(nodes.values(), key=lambda n: n._seq, reverse=True):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# ---------------------------------------------------------------- elementwise

def _operand(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if np.isscalar(x):
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(np.asarray(x), dtype=like.dtype)


def _check_pair(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _fit(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(dtype=np.float64), dtype=g.dtype).reshape(shape)


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _operand(b, a)
    _check_pair(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (_fit(g, a.shape), _fit(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _operand(a, b) if not isinstance(a, Tensor) else a
    b = _operand(b, a)
    _check_pair(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (_fit(g, a.shape), _fit(-g, b.shape)))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _operand(b, a)
    _check_pair(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_fit(g * b.data, a.shape), _fit(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2 * g * a.data,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    # keep the output in the open unit interval even where it saturates
    s = np.clip(s, np.finfo(x.dtype).tiny, np.nextafter(x.dtype.type(1), x.dtype.type(0)))
    return _make(s, (a,), lambda g: (g * s * (1 - s),))


def clamp_nonpositive(a: Tensor) -> Tensor:
    """min(a, 0); the subgradient at 0 is 0."""
    keep = a.data < 0
    return _make(np.where(keep, a.data, 0).astype(a.dtype), (a,), lambda g: (g * keep,))


def hinge(a: Tensor) -> Tensor:
    """max(0, a); the subgradient at 0 is 0."""
    keep = a.data > 0
    return _make(np.where(keep, a.data, 0).astype(a.dtype), (a,), lambda g: (g * keep,))


relu = hinge


def log(a: Tensor, guard: bool = False) -> Tensor:
    x = a.data
    if guard:
        live = x > LOG_EPS
        safe = np.where(live, x, LOG_EPS)
        return _make(np.log(safe).astype(x.dtype), (a,), lambda g: (np.where(live, g / safe, 0).astype(x.dtype),))
    bad = x <= 0
    if bad.any():
        idx = np.unravel_index(int(np.argmax(bad)), x.shape)
        raise DomainError(f"log of non-positive value {x[idx]!r} at index {tuple(int(i) for i in idx)}")
    return _make(np.log(x), (a,), lambda g: (g / x,))


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data, dtype=a.dtype)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


# ----------------------------------------------------------------- reductions

def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the reduction name
    total = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)
    return _make(total, (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    m = np.asarray(a.data.sum(dtype=np.float64) / n, dtype=a.dtype)
    return _make(m, (a,), lambda g: (np.broadcast_to(g / n, a.shape).astype(a.dtype),))


def masked_mean(a: Tensor, mask) -> Tensor:
    """Mean over entries where ``mask`` is 1.

    ``mask`` must have the shape of ``a`` or be one channel wide and span
    the same batch and spatial extent. An empty mask yields 0 and emits
    :class:`EmptyMaskWarning`.
    """
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if m.shape != a.shape:
        if m.ndim != a.ndim or m.shape[-2:] != a.shape[-2:] or m.shape[-3] != 1 or m.shape[:-3] != a.shape[:-3]:
            raise ShapeError(f"masked_mean: mask shape {m.shape} does not fit {a.shape}")
        m = np.broadcast_to(m, a.shape)
    if not np.isin(m, (0, 1)).all():
        raise ValueError("masked_mean: mask values must be 0 or 1")
    m = m.astype(a.dtype)
    count = float(m.sum(dtype=np.float64))
    if count == 0:
        warnings.warn("masked_mean over an empty mask; returning 0", EmptyMaskWarning, stacklevel=2)
        return _make(np.zeros((), a.dtype), (a,), lambda g: (np.zeros_like(a.data),))
    val = np.asarray((a.data * m).sum(dtype=np.float64) / count, dtype=a.dtype)
    return _make(val, (a,), lambda g: ((g / count) * m,))


def stack_sum(parts: Sequence[Tensor]) -> Tensor:
    """Elementwise sum of equal-shape tensors, independent of their order.

    Values are sorted per element and accumulated in float64, so any
    permutation of ``parts`` gives bit-identical output.
    """
    parts = list(parts)
    if not parts:
        raise ValueError("stack_sum needs at least one tensor")
    for p in parts[1:]:
        if p.shape != parts[0].shape:
            raise ShapeError(f"stack_sum: {parts[0].shape} vs {p.shape}")
    if len(parts) == 1:
        return _make(parts[0].data.copy(), parts, lambda g: (g,))
    stacked = np.sort(np.stack([p.data for p in parts]).astype(np.float64), axis=0)
    total = stacked[0].copy()
    for row in stacked[1:]:
        total += row
    out = total.astype(parts[0].dtype)
    return _make(out, parts, lambda g: tuple(g.astype(p.dtype) for p in parts))


# -------------------------------------------------------------------- spatial

def _chan_axis(a: Tensor) -> int:
    if a.ndim not in (3, 4):
        raise ShapeError(f"expected CxHxW or NxCxHxW, got shape {a.shape}")
    return a.ndim - 3


def concat_channels(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    axis = _chan_axis(parts[0])
    for p in parts[1:]:
        ps, qs = list(p.shape), list(parts[0].shape)
        ps[axis] = qs[axis] = 0
        if ps != qs:
            raise ShapeError(f"concat_channels: {parts[0].shape} vs {p.shape}")
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, range(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, back)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    axis = _chan_axis(a)
    if not 0 <= start < stop <= a.shape[axis]:
        raise ShapeError(f"slice_channels: [{start}, {stop}) out of range for {a.shape}")
    index = (slice(None),) * axis + (slice(start, stop),)

    def back(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(a.data[index].copy(), (a,), back)


def nearest_upsample2(a: Tensor) -> Tensor:
    _chan_axis(a)
    up = a.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def back(g):
        *lead, h2, w2 = g.shape
        return (g.reshape(*lead, h2 // 2, 2, w2 // 2, 2).sum(axis=(-3, -1)),)

    return _make(up, (a,), back)


def maxpool2(a: Tensor) -> Tensor:
    _chan_axis(a)
    *lead, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial size, got {a.shape}")
    blocks = a.data.reshape(*lead, h // 2, 2, w // 2, 2)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(*lead, h // 2, w // 2, 2, 2)
        return (np.moveaxis(gb, -2, -3).reshape(a.shape),)

    return _make(out, (a,), back)


def _conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    n, c, h, w = x.shape
    o = weight.shape[0]
    xs = x.data.reshape(n, c, h * w)
    wm = weight.data.reshape(o, c)
    out = np.matmul(wm, xs)
    if bias is not None:
        out += bias.data[:, None]

    def back(g):
        gs = g.reshape(n, o, h * w)
        gx = np.matmul(wm.T, gs).reshape(x.shape)
        gw = np.matmul(gs, xs.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        return (gx, gw) if bias is None else (gx, gw, gs.sum(axis=(0, 2)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out.reshape(n, o, h, w), parents, back)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding="same") -> Tensor:
    """Cross-correlation of ``x`` (CxHxW or NxCxHxW) with ``weight`` (O x C x K x K)."""
    if x.ndim == 3:
        out = conv2d(reshape(x, (1,) + x.shape), weight, bias, stride, padding)
        return reshape(out, out.shape[1:])
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: bad ranks input {x.shape}, weight {weight.shape}")
    n, c, h, w = x.shape
    o, wc, k, k2 = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {wc} (weight {weight.shape})")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
    pad = k // 2 if padding == "same" else int(padding)
    if k == 1 and stride == 1 and pad == 0:
        return _conv1x1(x, weight, bias)
    dt = x.dtype
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    hp, wp = h + 2 * pad, w + 2 * pad
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    cols = np.empty((n, c, k, k, ho, wo), dtype=dt)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols = cols.reshape(n, c * k * k, ho * wo)
    wmat = weight.data.reshape(o, c * k * k)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, o, ho, wo)

    def back(g):
        gs = g.reshape(n, o, ho * wo)
        gw = np.matmul(gs, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gb = gs.sum(axis=(0, 2)) if bias is not None else None
        gcols = np.matmul(wmat.T, gs).reshape(n, c, k, k, ho, wo)
        gxp = np.zeros((n, c, hp, wp), dtype=dt)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
        gx = gxp[:, :, pad : pad + h, pad : pad + w]
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(np.ascontiguousarray(out), parents, back)
