"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op produces a :class:`Tensor` holding its forward value.  When any input
requires a gradient the result also records its parents and a closure that
computes the vector-Jacobian product.  Node ids come from a monotone counter,
so sorting reachable nodes by id is a valid topological order; the implicit
graph of a loss is the set of nodes reachable from it.

Broadcasting is deliberately narrow.  Binary elementwise ops accept operands
of identical shape, a scalar operand, or a "bias" operand whose shape equals
the trailing dimensions of the other operand (e.g. ``(N, d)`` with ``(d,)``).
Anything else raises :class:`ShapeError`.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "apply",
    "backward",
    "grad_check",
    "grad_check_leaves",
    "no_grad",
    "tensor",
    "constant",
    "parameter",
]

_ids = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible with an op's broadcasting rule."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""

    def __init__(self, op: str, shape=None):
        self.op = op
        super().__init__(f"{op}: non-finite value in output of shape {shape}")


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate ops without recording graph nodes."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "vjp", "op", "id", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None, _checked=False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if not _checked and not np.isfinite(arr).all():
            raise NonFiniteError("tensor", arr.shape)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.parents: tuple = ()
        self.vjp: Optional[Callable] = None
        self.op = "leaf"
        self.id = next(_ids)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self.vjp is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f", op={self.op}" if self.op != "leaf" else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return negate(self)

    def __getitem__(self, key):
        return index(self, key)


def tensor(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


constant = tensor


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _make(op: str, out: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError(op, out.shape)
    t = Tensor(out, _checked=True)
    t.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t.parents = tuple(parents)
        t.vjp = vjp
    return t


# ---------------------------------------------------------------------------
# broadcasting helpers


def _bcast(op: str, a: Tensor, b: Tensor):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if b.ndim == 0 or (b.ndim < a.ndim and sa[a.ndim - b.ndim:] == sb):
        return sa
    if a.ndim == 0 or (a.ndim < b.ndim and sb[b.ndim - a.ndim:] == sa):
        return sb
    raise ShapeError(op, sa, sb)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g.sum().reshape(shape)


def _to_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# ops


def add(a, b) -> Tensor:
    a, b = _to_tensor(a), _to_tensor(b)
    _bcast("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def subtract(a, b) -> Tensor:
    a, b = _to_tensor(a), _to_tensor(b)
    _bcast("subtract", a, b)
    return _make("subtract", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def multiply(a, b) -> Tensor:
    a, b = _to_tensor(a), _to_tensor(b)
    _bcast("multiply", a, b)
    return _make("multiply", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def bias_add(a, b) -> Tensor:
    """``a + b`` where ``b`` broadcasts over the leading axis of ``a``."""
    a, b = _to_tensor(a), _to_tensor(b)
    if b.ndim == 0 or a.shape[a.ndim - b.ndim:] != b.shape or b.ndim >= a.ndim:
        raise ShapeError("bias_add", a.shape, b.shape)
    return add(a, b)


def matmul(a, b) -> Tensor:
    a, b = _to_tensor(a), _to_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _make("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def negate(a) -> Tensor:
    a = _to_tensor(a)
    return _make("negate", -a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = _to_tensor(a)
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def tanh(a) -> Tensor:
    a = _to_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _to_tensor(a)
    s = _sigmoid(a.data)
    return _make("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def swish(a) -> Tensor:
    a = _to_tensor(a)
    s = _sigmoid(a.data)
    out = a.data * s
    return _make("swish", out, (a,), lambda g: (g * (s + out * (1.0 - s)),))


def identity(a) -> Tensor:
    return _to_tensor(a)


def exp(a) -> Tensor:
    a = _to_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _to_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data,))


def square(a) -> Tensor:
    a = _to_tensor(a)
    return _make("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient is zero outside the open range."""
    a = _to_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)
    return _make("clamp", out, (a,), lambda g: (g * inside,))


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    return axis % ndim


def sum(a, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _to_tensor(a)
    ax = _norm_axis(axis, max(a.ndim, 1))
    out = a.data.sum(axis=ax)

    def vjp(g):
        if ax is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, ax), a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), vjp)


def mean(a, axis: Optional[int] = None) -> Tensor:
    a = _to_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def logsumexp(a, axis: int = -1) -> Tensor:
    """Stable ``log(sum(exp(a)))`` along ``axis`` (max-subtraction)."""
    a = _to_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    m = a.data.max(axis=ax, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=ax, keepdims=True)
    out = (np.log(s) + m).squeeze(ax)
    soft = e / s
    return _make("logsumexp", out, (a,), lambda g: (np.expand_dims(g, ax) * soft,))


def index(a, key) -> Tensor:
    a = _to_tensor(a)
    out = np.array(a.data[key])

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _make("index", out, (a,), vjp)


def stack(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    items = [_to_tensor(t) for t in items]
    shapes = {t.shape for t in items}
    if len(shapes) != 1:
        raise ShapeError("stack", *[t.shape for t in items])
    out = np.stack([t.data for t in items], axis=axis)
    ax = _norm_axis(axis, out.ndim)
    return _make("stack", out, items,
                 lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(items))))


def concat(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    items = [_to_tensor(t) for t in items]
    try:
        out = np.concatenate([t.data for t in items], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in items]) from None
    splits = np.cumsum([t.shape[axis] for t in items])[:-1]
    return _make("concat", out, items, lambda g: tuple(np.split(g, splits, axis=axis)))


def reshape(a, shape) -> Tensor:
    a = _to_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def logaddexp(a, b) -> Tensor:
    """Elementwise ``log(exp(a) + exp(b))`` for same-shape operands."""
    a, b = _to_tensor(a), _to_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("logaddexp", a.shape, b.shape)
    out = np.logaddexp(a.data, b.data)
    wa = np.exp(a.data - out)
    wb = np.exp(b.data - out)
    return _make("logaddexp", out, (a, b), lambda g: (g * wa, g * wb))


_OPS: Dict[str, Callable] = {
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "matmul": matmul,
    "bias_add": bias_add,
    "tanh": tanh,
    "swish": swish,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "negate": negate,
    "scale": scale,
    "sum": sum,
    "mean": mean,
    "logsumexp": logsumexp,
    "square": square,
    "clamp": clamp,
    "logaddexp": logaddexp,
}


def apply(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an op by name, e.g. ``apply("logsumexp", t, axis=0)``."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}; known: {sorted(_OPS)}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward


def _reachable(root: Tensor) -> List[Tensor]:
    seen = {root.id: root}
    stack_ = [root]
    while stack_:
        node = stack_.pop()
        for p in node.parents:
            if p.requires_grad and p.id not in seen:
                seen[p.id] = p
                stack_.append(p)
    return sorted(seen.values(), key=lambda t: t.id)


def backward(loss: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> Dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to leaf tensors.

    Returns a map from node id to gradient array for every leaf reachable from
    ``loss``; leaves listed in ``wrt`` that are unreachable get zero arrays.
    Leaf ``.grad`` attributes are overwritten (not accumulated).
    """
    if loss.size != 1:
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    grads: Dict[int, np.ndarray] = {}
    out: Dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[loss.id] = np.ones_like(loss.data)
        for node in reversed(_reachable(loss)):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node.is_leaf:
                out[node.id] = g
                node.grad = g
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if not parent.requires_grad:
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg
    for leaf in wrt or ():
        if leaf.id not in out:
            z = np.zeros_like(leaf.data)
            out[leaf.id] = z
            leaf.grad = z
    return out


# ---------------------------------------------------------------------------
# finite-difference checking


def _central_diff(f_value: Callable[[], float], arr: np.ndarray, step: float) -> np.ndarray:
    num = np.zeros_like(arr)
    flat = arr.reshape(-1)
    out = num.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f_value()
        flat[i] = orig - step
        fm = f_value()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("grad_check", arr.shape)
        out[i] = (fp - fm) / (2.0 * step)
    return num


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def grad_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max relative error between the analytic gradient of ``f`` at ``point``
    and central differences, ``|a - n| / max(1, |n|)``."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = parameter(np.array(point, dtype=np.float64))
    y = f(x)
    backward(y, wrt=[x])
    analytic = x.grad.copy()
    work = x.data.copy()

    def value():
        with no_grad():
            return f(Tensor(work)).item()

    return _rel_err(analytic, _central_diff(value, work, step))


def grad_check_leaves(f: Callable[[], Tensor], leaves: Sequence[Tensor], step: float = 1e-5) -> float:
    """Like :func:`grad_check` for a closure over several parameter leaves.

    The leaves are perturbed in place and restored afterwards.
    """
    y = f()
    backward(y, wrt=leaves)
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad.copy()

        def value():
            with no_grad():
                return f().item()

        worst = max(worst, _rel_err(analytic, _central_diff(value, leaf.data, step)))
    return worst
