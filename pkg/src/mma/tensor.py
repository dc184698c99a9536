"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Every learned quantity in the package flows through :class:`Tensor`.  Each
operation records its parents and a closure that maps the upstream gradient to
gradients for those parents; :func:`backward` walks the recorded graph in
reverse topological order and then releases it, so a graph can be
differentiated exactly once.

Forward results are checked for NaN/Inf: an overflow raises
``FloatingPointError`` instead of propagating silently.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "GraphConsumedError",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "elementwise",
    "matmul",
    "softmax",
    "log_softmax",
    "tsum",
    "mean",
    "tmax",
    "reshape",
    "transpose",
    "take",
    "concat",
    "linear",
    "smooth_l1",
    "bce_with_logits",
    "cross_entropy",
    "backward",
    "grad_check",
]

DEFAULT_DTYPE = np.float64


class GraphConsumedError(RuntimeError):
    """Raised when backward is replayed through an already-released graph."""


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode gradients.

    Only ``grad`` is mutated after construction.  Non-leaf tensors keep a
    reference to their parents until the graph is consumed by :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._consumed

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return tmax(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    return _as_tensor(a, b), b


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        for p in parents:
            if p._consumed:
                raise GraphConsumedError(f"{op} consumes a tensor whose graph was already released")
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    out.op = op
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting stretched to reach its shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# -- elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)

    with np.errstate(over="ignore", invalid="ignore"):
        out = ad * bd
    return _make(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def bw(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _make(out, (a, b), bw, "div")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0).astype(a.dtype, copy=False), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return _make(out, (a,), lambda g: (g / x,), "log")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a: Tensor, b: Tensor | None = None, factor: float | None = None) -> Tensor:
    """Dispatch one of ``add``, ``sub``, ``mul``, ``relu`` or ``scale``."""
    if kind in _ELEMENTWISE:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _ELEMENTWISE[kind](a, b)
    if kind == "relu":
        return relu(a)
    if kind == "scale":
        if factor is None:
            raise ValueError("scale needs a factor")
        return scale(a, factor)
    raise ValueError(f"unknown elementwise op {kind!r}")


# -- linear algebra ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    with np.errstate(over="ignore", invalid="ignore"):
        out = np.matmul(ad, bd)
    return _make(out, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight + bias``."""
    if x.ndim == 2:
        out = matmul(x, weight)
    else:
        lead = x.shape[:-1]
        out = reshape(matmul(reshape(x, (-1, x.shape[-1])), weight), lead + (weight.shape[-1],))
    return out if bias is None else add(out, bias)


# -- normalisations --------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; each slice along ``axis`` sums to one."""
    if a.shape[axis] < 1:
        raise ValueError("softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.shape[axis] < 1:
        raise ValueError("log_softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


# -- reductions ------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def tmax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient goes to the first maximal entry only."""
    if axis is None:
        out = tmax(reshape(a, (-1,)), axis=0)
        return reshape(out, (1,) * a.ndim) if keepdims else out
    ax = axis % a.ndim
    idx = np.argmax(a.data, axis=ax)
    out = np.take_along_axis(a.data, np.expand_dims(idx, ax), axis=ax)
    shape = a.shape

    def bw(g):
        grad = np.zeros(shape, dtype=g.dtype)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(grad, np.expand_dims(idx, ax), gk, axis=ax)
        return (grad,)

    return _make(out if keepdims else np.squeeze(out, ax), (a,), bw, "max")


# -- shape manipulation ---------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def _getitem(a: Tensor, key) -> Tensor:
    shape, dtype = a.shape, a.dtype
    keys = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (slice, int)) or k is None or k is Ellipsis for k in keys)

    def bw(g):
        grad = np.zeros(shape, dtype=dtype)
        if basic:
            grad[key] = g
        else:
            np.add.at(grad, key, g)
        return (grad,)

    return _make(np.array(a.data[key]), (a,), bw, "getitem")


def take(a: Tensor, indices) -> Tensor:
    """Gather rows along axis 0; output shape is ``indices.shape + a.shape[1:]``.

    The backward pass scatter-adds, so a row gathered twice receives twice the
    gradient.
    """
    idx = np.asarray(indices, dtype=np.intp)
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather index out of range for {n} rows")
    shape, dtype = a.shape, a.dtype
    rows = idx.reshape(-1)

    def bw(g):
        flat = g.reshape(len(rows), -1)
        # scatter-add as a sparse product: deterministic and much faster than ufunc.at
        scatter = sp.csr_matrix((np.ones(len(rows), dtype=dtype), (rows, np.arange(len(rows)))), shape=(n, len(rows)))
        return (np.asarray(scatter @ flat).reshape(shape),)

    return _make(a.data[idx], (a,), bw, "take")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw, "concat")


# -- losses ----------------------------------------------------------------


def smooth_l1(pred: Tensor, target, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style loss; quadratic below ``beta``, linear above."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    diff = pred.data - t
    ad = np.abs(diff)
    out = np.where(ad < beta, 0.5 * diff * diff / beta, ad - 0.5 * beta)

    def bw(g):
        return (g * np.where(ad < beta, diff / beta, np.sign(diff)),)

    return _make(out, (pred,), bw, "smooth_l1")


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy on raw logits."""
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    out = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    e = np.exp(-np.abs(z))
    sig = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (logits,), lambda g: (g * (sig - t),), "bce_with_logits")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-softmax of ``logits``."""
    t = np.asarray(targets, dtype=np.intp)
    logits2 = logits if logits.ndim == 2 else reshape(logits, (1, -1))
    t = t.reshape(-1)
    if t.shape[0] != logits2.shape[0]:
        raise ValueError("cross_entropy: one target per row required")
    lp = log_softmax(logits2, axis=-1)
    rows = np.arange(t.shape[0])
    picked = _getitem(lp, (rows, t))
    return scale(tsum(picked), -1.0 / t.shape[0])


# -- differentiation -------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves listed in ``params`` that the loss does not reach get a zero
    gradient.  The graph is released afterwards; a second call raises
    :class:`GraphConsumedError`.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("backward already ran on this graph")
    order = _topo_order(loss) if loss.requires_grad else []
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._consumed:
            raise GraphConsumedError("backward reached a released graph node")
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True
    if not order:
        loss._consumed = True
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def grad_check(f: Callable, x, eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of scalar ``f(x)`` to central differences.

    ``x`` is a Tensor or a sequence of Tensors (passed to ``f`` unchanged).
    Returns the max over coordinates of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    out = f(x)
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    backward(out, xs)
    for t in xs:
        t.requires_grad = False
    worst = 0.0
    for t in xs:
        analytic = t.grad.reshape(-1).copy()
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(x).data.reshape(-1)[0])
            flat[i] = orig - eps
            fm = float(f(x).data.reshape(-1)[0])
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]), abs(numeric))
            worst = max(worst, err)
    for t in xs:
        t.requires_grad = True
    return worst
