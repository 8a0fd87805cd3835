"""A small reverse-mode differentiation engine over numpy arrays.

Every node of the graph is a :class:`Tensor`.  Operations build new tensors that
remember their parents and a closure mapping the output gradient to one
gradient per parent.  :meth:`Tensor.backward` walks the graph once in reverse
topological order.

Policies:

* elementwise binary ops accept same-shape operands or a scalar operand;
  anything else is a :class:`ShapeError`.  Broadcasting is explicit through
  :func:`expand`.
* max-type reductions route the subgradient to the first maximising element
  in scan order.
* a graph can be backpropagated only once; a second call raises
  :class:`GraphError`.  Leaf gradients accumulate across distinct graphs until
  :func:`zero_grad` is called.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, GraphError, NumericError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, np.ndarray) and dtype is None and np.issubdtype(data.dtype, np.floating):
        return data
    return np.asarray(data, dtype=dtype or np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self._consumed = False

    @classmethod
    def _from_op(cls, data, parents, backward, op) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out._consumed = False
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # -- backward ------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor requiring grad")
        order = _topological_order(self)
        for node in order:
            if node._consumed:
                raise GraphError("graph has already been backpropagated")
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            fn = node._backward
            if fn is None:
                continue
            grads = fn(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
            # free the interior of the graph as soon as it has been used
            node.grad = None
            node._backward = None
            node._parents = ()
            node._consumed = True

    # -- operator sugar ------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list[Tensor]:
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


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"operands {a.shape} and {b.shape} are neither equal nor scalar; use expand()")
    return a, b


def _scalar_out_shape(a: Tensor, b: Tensor) -> tuple:
    # a size-1 operand never changes the shape of the other one
    if a.size == 1 and b.size != 1:
        return b.shape
    if b.size == 1 and a.size != 1:
        return a.shape
    return a.shape if a.ndim >= b.ndim else b.shape


def _fix(result: np.ndarray, shape: tuple) -> np.ndarray:
    return result if result.shape == shape else result.reshape(shape)


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    shape = _scalar_out_shape(a, b)
    out = _fix(a.data + b.data, shape)
    return Tensor._from_op(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add"
    )


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    shape = _scalar_out_shape(a, b)
    out = _fix(a.data - b.data, shape)
    return Tensor._from_op(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub"
    )


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    shape = _scalar_out_shape(a, b)
    ad, bd = a.data, b.data
    out = _fix(ad * bd, shape)

    def backward(g):
        return (
            _unbroadcast(g * bd, a.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, b.shape) if b.requires_grad else None,
        )

    return Tensor._from_op(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    shape = _scalar_out_shape(a, b)
    ad, bd = a.data, b.data
    out = _fix(ad / bd, shape)

    def backward(g):
        return (
            _unbroadcast(g / bd, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * ad / (bd * bd), b.shape) if b.requires_grad else None,
        )

    return Tensor._from_op(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._from_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._from_op(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def maximum(a: Tensor, c: float) -> Tensor:
    """max(a, c) elementwise against a constant scalar; ties send no gradient to a."""
    if isinstance(c, Tensor):
        raise ShapeError("maximum() compares against a plain scalar")
    ad = a.data
    mask = ad > c
    out = np.where(mask, ad, np.asarray(c, dtype=ad.dtype))
    return Tensor._from_op(out, (a,), lambda g: (g * mask,), "maximum")


# -- linear algebra ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul operands must be at least 1-d")
    inner_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if a.shape[-1] != inner_b:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    ad, bd = a.data, b.data

    def backward(g):
        A = ad[None, :] if ad.ndim == 1 else ad
        B = bd[:, None] if bd.ndim == 1 else bd
        G = g
        if ad.ndim == 1:
            G = np.expand_dims(G, -2)
        if bd.ndim == 1:
            G = np.expand_dims(G, -1)
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(G, np.swapaxes(B, -1, -2))
            ga = _unbroadcast(ga, A.shape).reshape(ad.shape)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(A, -1, -2), G)
            gb = _unbroadcast(gb, B.shape).reshape(bd.shape)
        return ga, gb

    return Tensor._from_op(out, (a, b), backward, "matmul")


# -- reductions ----------------------------------------------------------


def _normalize_axis(axis, ndim):
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axis = _normalize_axis(axis, a.ndim)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(out), (a,), backward, "sum")


def row_sum(a: Tensor) -> Tensor:
    """Sum over the last axis (the columns of each row)."""
    return reduce_sum(a, axis=-1)


def column_sum(a: Tensor) -> Tensor:
    """Sum over the second-to-last axis (the rows of each column)."""
    if a.ndim < 2:
        raise ShapeError("column_sum needs at least a 2-d tensor")
    return reduce_sum(a, axis=-2)


def reduce_max(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axis = _normalize_axis(axis, a.ndim)
    ad = a.data
    if ad.size == 0:
        raise ShapeError("max of an empty tensor")
    if axis is None:
        flat = int(np.argmax(ad))
        out = ad.reshape(-1)[flat]
        out = np.asarray(out).reshape((1,) * ad.ndim if keepdims else ())

        def backward(g):
            z = np.zeros(ad.size, dtype=ad.dtype)
            z[flat] = np.asarray(g).reshape(())
            return (z.reshape(ad.shape),)

        return Tensor._from_op(out, (a,), backward, "max")

    idx = np.expand_dims(np.argmax(ad, axis=axis), axis)
    out = np.take_along_axis(ad, idx, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        z = np.zeros_like(ad)
        np.put_along_axis(z, idx, g, axis=axis)
        return (z,)

    return Tensor._from_op(out, (a,), backward, "max")


def topk(a: Tensor, k: int, axis: int = -1) -> tuple[Tensor, np.ndarray]:
    """The k largest entries along ``axis`` in descending order, and their indices.

    Ties resolve to the lower index.  The gradient of each selected value goes
    to the entry it was taken from.
    """
    axis = _normalize_axis(axis, a.ndim)
    n = a.shape[axis]
    if not 1 <= k <= n:
        raise ContractError(f"k={k} must lie in [1, {n}]")
    ad = a.data
    if np.isnan(ad).any():
        raise NumericError("topk on NaN input")
    idx = np.argsort(-ad, axis=axis, kind="stable")
    idx = np.take(idx, np.arange(k), axis=axis)
    out = np.take_along_axis(ad, idx, axis=axis)

    def backward(g):
        z = np.zeros_like(ad)
        np.put_along_axis(z, idx, g, axis=axis)
        return (z,)

    return Tensor._from_op(out, (a,), backward, "topk"), idx


# -- shape manipulation --------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    src = a.shape
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(src),), "reshape")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = np.swapaxes(a.data, ax1, ax2)
    return Tensor._from_op(out, (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def expand(a: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast of ``a`` to ``shape``."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    src = a.shape
    return Tensor._from_op(out, (a,), lambda g: (_unbroadcast(g, src),), "expand")


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    ad = a.data
    items = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(i, (list, np.ndarray)) for i in items)

    def backward(g):
        z = np.zeros_like(ad)
        if fancy:
            np.add.at(z, idx, g)
        else:
            z[idx] = g
        return (z,)

    return Tensor._from_op(out, (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._from_op(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    n = len(tensors)

    def backward(g):
        return tuple(np.squeeze(piece, axis) for piece in np.split(g, n, axis=axis))

    return Tensor._from_op(out, tensors, backward, "stack")


# -- normalisers ---------------------------------------------------------


def softmax_scaled(s: Tensor, alpha: float, axis: int = -1) -> Tensor:
    """Peaked softmax ``exp(alpha*s) / sum exp(alpha*s)`` along ``axis``.

    The maximum is subtracted before scaling, so very large ``alpha`` cannot
    overflow and a constant added to ``s`` cancels before any rounding that
    depends on ``alpha``.
    """
    if not alpha > 0:
        raise ContractError(f"alpha must be positive, got {alpha}")
    sd = s.data
    if not np.all(np.isfinite(sd)):
        raise NumericError("softmax_scaled on non-finite input")
    axis = _normalize_axis(axis, sd.ndim)
    z = alpha * (sd - sd.max(axis=axis, keepdims=True))
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = np.sum(g * p, axis=axis, keepdims=True)
        return (alpha * p * (g - inner),)

    return Tensor._from_op(p, (s,), backward, "softmax_scaled")


def log_softmax(s: Tensor, axis: int = -1) -> Tensor:
    sd = s.data
    axis = _normalize_axis(axis, sd.ndim)
    shifted = sd - sd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (s,), backward, "log_softmax")


# -- fused recurrent cell ------------------------------------------------


def lstm_cell(gates: Tensor, c_prev: Tensor) -> Tensor:
    """One LSTM update from pre-activations.

    ``gates`` has trailing size 4H in the order (input, forget, candidate,
    output); ``c_prev`` has trailing size H.  Returns the concatenation
    ``[h, c]`` with trailing size 2H.
    """
    gd, cp = gates.data, c_prev.data
    H = cp.shape[-1]
    if gd.shape[-1] != 4 * H or gd.shape[:-1] != cp.shape[:-1]:
        raise ShapeError(f"lstm_cell gates {gd.shape} do not match cell {cp.shape}")
    i = _sigmoid(gd[..., :H])
    f = _sigmoid(gd[..., H : 2 * H])
    cand = np.tanh(gd[..., 2 * H : 3 * H])
    o = _sigmoid(gd[..., 3 * H :])
    c = f * cp + i * cand
    tc = np.tanh(c)
    h = o * tc
    out = np.concatenate([h, c], axis=-1)

    def backward(g):
        gh, gc = g[..., :H], g[..., H:]
        gc = gc + gh * o * (1.0 - tc * tc)
        dgates = np.concatenate(
            [
                gc * cand * i * (1.0 - i),
                gc * cp * f * (1.0 - f),
                gc * i * (1.0 - cand * cand),
                gh * tc * o * (1.0 - o),
            ],
            axis=-1,
        )
        return dgates, gc * f

    return Tensor._from_op(out, (gates, c_prev), backward, "lstm_cell")


# -- finite differences --------------------------------------------------


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. every entry of ``t``."""
    grad = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = fn().item()
            flat[j] = orig - eps
            down = fn().item()
            flat[j] = orig
            gflat[j] = (up - down) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)``."""
    diff = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


def check_gradients(
    fn: Callable[[], Tensor], tensors: dict[str, Tensor], eps: float = 1e-5
) -> dict[str, float]:
    """Relative error between backprop and central differences, per tensor."""
    for t in tensors.values():
        t.grad = None
    loss = fn()
    loss.backward()
    report = {}
    for name, t in tensors.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        report[name] = relative_error(analytic, numerical_grad(fn, t, eps))
    return report
