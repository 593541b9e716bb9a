"""A small dense-tensor engine with reverse-mode automatic differentiation.

Every value is a :class:`Tensor` holding a float64 numpy array. Operations
record their parents and a closure mapping the output gradient to one
gradient per parent; :func:`backward` replays those closures in reverse
topological order. Tensors with ``requires_grad=False`` are never given a
``grad`` array, and operations whose inputs are all frozen record no graph at
all, so a frozen forward pass costs no more than plain numpy.

Broadcasting is deliberately limited to suffix shapes (bias-add style) so
each gradient rule stays easy to audit.
"""
from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ArgumentError, DimensionError, NumericInputError, UndefinedLossError

_ids = itertools.count()

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: BackwardFn | None = _backward

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise ArgumentError("only division by a python scalar is supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def backward(self):
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)


def _suffix_compatible(big: tuple, small: tuple) -> bool:
    return len(small) <= len(big) and tuple(big[len(big) - len(small):]) == tuple(small)


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    return grad


# -- graph -------------------------------------------------------------------

def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every input ahead of its consumer."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and parent.node_id not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable tensor that requires it.

    Gradients accumulate into existing ``grad`` arrays, so callers clear
    them between optimisation steps (see :func:`zero_grad`).
    """
    if loss.size != 1:
        raise ArgumentError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topo_order(loss)
    pending: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(node.node_id, None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = pending.get(parent.node_id)
            pending[parent.node_id] = pg if prev is None else prev + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape or _suffix_compatible(a.shape, b.shape):
        big, small = a, b
    elif _suffix_compatible(b.shape, a.shape):
        big, small = b, a
    else:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} are not suffix-compatible")
    out = a.data + b.data

    def back(g):
        return g if a is big else _reduce_to(g, a.shape), g if b is big else _reduce_to(g, b.shape)

    return _make(out, (a, b), back, "add")


def add_constant(x: Tensor, const: np.ndarray) -> Tensor:
    """``x + const`` where ``const`` is a non-differentiable array broadcast onto x."""
    return _make(x.data + const, (x,), lambda g: (g,), "add_constant")


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if not (a.shape == b.shape or _suffix_compatible(a.shape, b.shape)
            or _suffix_compatible(b.shape, a.shape)):
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} are not suffix-compatible")
    out = a.data * b.data

    def back(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _make(out, (a, b), back, "mul")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v * v * v)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _make(out, (x,), back, "gelu")


# -- shape -------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def concat_lastdim(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ArgumentError("concat_lastdim needs at least one tensor")
    parts = [_as_tensor(p) for p in parts]
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise DimensionError(
                f"concat_lastdim: leading shapes differ: {parts[0].shape} vs {p.shape}")
    widths = [p.shape[-1] for p in parts]
    cuts = np.cumsum(widths)[:-1]
    out = np.concatenate([p.data for p in parts], axis=-1)

    def back(g):
        return tuple(np.split(g, cuts, axis=-1))

    return _make(out, parts, back, "concat")


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _make(out, (table,), back, "take_rows")


def take_positions(x: Tensor, index: np.ndarray) -> Tensor:
    """For x[b, l, d] and one position per row, return x[i, index[i]] -> [b, d]."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 3 or index.shape != (x.shape[0],):
        raise DimensionError(f"take_positions: x {x.shape} vs index {index.shape}")
    rows = np.arange(x.shape[0])
    out = x.data[rows, index]

    def back(g):
        full = np.zeros_like(x.data)
        full[rows, index] = g
        return (full,)

    return _make(out, (x,), back, "take_positions")


# -- reductions --------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _make(np.asarray(x.data.mean()), (x,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean")


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), back, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Apply ``x @ weight + bias`` over the last axis of x (weight is [in, out])."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), weight)
    y = reshape(y, lead + (weight.shape[1],))
    return y if bias is None else add(y, bias)


# -- normalisation / probabilities ------------------------------------------

def softmax_lastdim(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    if not np.all(np.isfinite(x.data)):
        raise NumericInputError("softmax_lastdim received non-finite input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), back, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm over an empty last axis")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        dbias = g.sum(axis=lead) if bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gain.data
            dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _make(out, (x, gain, bias), back, "layer_norm")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels, ignore_index: int = -100) -> Tensor:
    """Mean softmax cross-entropy over rows whose label is not ``ignore_index``."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [batch, classes], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, c = logits.shape
    if labels.shape[0] != b:
        raise DimensionError(f"cross_entropy: {b} rows but {labels.shape[0]} labels")
    keep = labels != ignore_index
    bad = keep & ((labels < 0) | (labels >= c))
    if bad.any():
        raise ArgumentError(f"label out of range [0, {c}): {labels[bad][:5].tolist()}")
    n = int(keep.sum())
    if n == 0:
        raise UndefinedLossError("every row is ignored; cross-entropy is undefined")
    rows = np.nonzero(keep)[0]
    logp = _log_softmax(logits.data[rows])
    loss = -logp[np.arange(n), labels[rows]].sum() / n

    def back(g):
        grad = np.zeros_like(logits.data)
        p = np.exp(logp)
        p[np.arange(n), labels[rows]] -= 1.0
        grad[rows] = p * (g / n)
        return (grad,)

    return _make(np.asarray(loss), (logits,), back, "cross_entropy")


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean per-element sigmoid binary cross-entropy."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise DimensionError(f"bce_with_logits: logits {logits.shape} vs targets {targets.shape}")
    z = logits.data
    n = z.size
    loss = (np.maximum(z, 0) - z * targets + np.log1p(np.exp(-np.abs(z)))).sum() / n

    def back(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * z))
        return ((sig - targets) * (g / n),)

    return _make(np.asarray(loss), (logits,), back, "bce_with_logits")


# -- finite differences ------------------------------------------------------

def finite_difference_grad(fn: Callable[[], Tensor], wrt: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar ``fn()`` with respect to ``wrt``.

    ``fn`` is re-evaluated with ``wrt.data`` perturbed in place; only forward
    values are used, so this is independent of every backward rule.
    """
    flat = wrt.data.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(fn().data)
        flat[i] = orig - eps
        lo = float(fn().data)
        flat[i] = orig
        out[i] = (hi - lo) / (2 * eps)
    return out.reshape(wrt.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)``.

    The floor matters only for gradients that are identically zero (a bias
    under a shift-invariant softmax, say), where both sides are rounding
    noise and a pure ratio would be 0/0.
    """
    diff = np.linalg.norm(np.asarray(analytic) - np.asarray(numeric))
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / denom)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Largest relative error between backprop and finite differences over ``inputs``."""
    zero_grad(inputs)
    loss = fn()
    backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]
    zero_grad(inputs)
    worst = 0.0
    for t, a in zip(inputs, analytic):
        worst = max(worst, relative_error(a, finite_difference_grad(fn, t, eps)))
    return worst
