"""Dense float64 tensors with reverse-mode automatic differentiation.

Each operation records its inputs and a backward rule on the result, so a
computation eagerly builds a DAG. ``backward`` replays that DAG once in
reverse topological order and accumulates gradients on ``requires_grad``
leaves. Recording can be switched off with ``no_grad`` (used for decoding).
All math is 64-bit; a graph must not be shared across threads.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "MaskError",
    "ShapeError",
    "Tensor",
    "add",
    "backward",
    "dropout",
    "embedding",
    "layer_norm",
    "log_softmax",
    "masked_softmax",
    "matmul",
    "mul",
    "no_grad",
    "relu",
    "reshape",
    "scale",
    "transpose",
    "tsum",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class MaskError(ValueError):
    """An attention mask violates an invariant, e.g. a fully masked row."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float64 array, optionally tracked by the autograd graph.

    ``grad`` is populated (and accumulated across repeated ``backward``
    calls) only on leaves created with ``requires_grad=True``; results of
    operations inherit ``requires_grad`` from their inputs so the reverse
    pass can reach those leaves.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __rsub__(self, other):
        return add(_wrap(other), -self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
    return out


def backward(loss: Tensor) -> None:
    """Run one reverse pass from a scalar loss, accumulating leaf ``grad``s.

    The recorded DAG is walked in reverse topological order and every node
    is visited exactly once; repeated calls (after rebuilding the graph)
    are bit-identical, and calls without ``zero_grad`` keep accumulating.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._bwd is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            continue
        for parent, pg in zip(node._parents, node._bwd(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            # never += into pg: it may alias g or a view shared with siblings
            grads[id(parent)] = pg if acc is None else acc + pg


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g over axes that were broadcast so it matches ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with right-aligned broadcasting."""
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with right-aligned broadcasting."""
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(g):
        ga = _reduce_to(g * b.data, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar."""
    c = float(c)

    def bwd(g):
        return (g * c,)

    return _make(a.data * c, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading batch axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ: {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch extents incompatible: {a.shape} @ {b.shape}") from None

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _reduce_to(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape)
        if b.requires_grad:
            gb = _reduce_to(np.matmul(a.data.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return _make(data, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    def bwd(g):
        return (g * (x.data > 0),)

    return _make(np.maximum(x.data, 0.0), (x,), bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape

    def bwd(g):
        return (g.reshape(old),)

    return _make(x.data.reshape(shape), (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _make(x.data.transpose(axes), (x,), bwd)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum over the given axes (all axes when ``axis`` is None)."""
    data = x.data.sum(axis=axis, keepdims=keepdims)
    expand = None
    if axis is not None and not keepdims:
        norm = axis if isinstance(axis, tuple) else (axis,)
        expand = tuple(a % x.ndim for a in norm)

    def bwd(g):
        if expand is not None:
            g = np.expand_dims(g, expand)
        return (np.broadcast_to(g, x.shape),)

    return _make(data, (x,), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a (V, d) table by an integer id array."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be rank 2, got {table.shape}")

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), bwd)


def masked_softmax(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to positions where mask is True.

    Masked entries are excluded from the max and the normalizing sum and
    come out exactly 0.0. A row with no allowed entry is an invariant
    violation and raises rather than producing NaN.
    """
    mask = np.asarray(mask, dtype=bool)
    try:
        if np.broadcast_shapes(logits.shape, mask.shape) != logits.shape:
            raise ShapeError(f"mask shape {mask.shape} does not broadcast to logits {logits.shape}")
    except ValueError:
        raise ShapeError(f"mask shape {mask.shape} does not broadcast to logits {logits.shape}") from None
    if not mask.any(axis=-1).all():
        raise MaskError("masked_softmax: fully masked row (every query needs >= 1 allowed key)")

    x = logits.data
    mx = np.where(mask, x, -np.inf).max(axis=-1, keepdims=True)
    # exp(-inf) is exactly 0.0, so masked entries never touch the sum
    e = np.exp(np.where(mask, x - mx, -np.inf))
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _make(p, (logits,), bwd)


def log_softmax(x: Tensor) -> Tensor:
    """Log of softmax over the last axis, computed stably."""
    mx = x.data.max(axis=-1, keepdims=True)
    shifted = x.data - mx
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({d},)")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def bwd(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            ghat = g * gain.data
            m1 = ghat.mean(axis=-1, keepdims=True)
            m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
            gx = (ghat - m1 - xhat * m2) * inv
        if gain.requires_grad:
            ggain = (g * xhat).sum(axis=lead)
        if bias.requires_grad:
            gbias = g.sum(axis=lead)
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), bwd)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator] = None,
            training: bool = False) -> Tensor:
    """Inverted dropout; the identity when not training or rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    factor = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def bwd(g):
        return (g * factor,)

    return _make(x.data * factor, (x,), bwd)


def finite_difference_gradients(f: Callable[[], float], params: Sequence[Tensor],
                                h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradients of ``f`` w.r.t. each tensor in ``params``.

    Independent of the reverse pass: only re-evaluates the forward function
    with single entries perturbed by +/- h.
    """
    out = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f()
            flat[i] = orig - h
            lo = f()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * h)
        out.append(g)
    return out


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """max |a-b| / max(|a|, |b|, floor), elementwise."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
