"""Dense numpy-backed tensors with a reverse-mode tape.

Every op that touches a tensor with ``requires_grad`` records a node holding
its inputs and a closure mapping the output cotangent to input cotangents.
Node ids grow monotonically, so sorting reachable nodes by id gives a valid
topological order; :func:`backward` walks that order in reverse exactly once.

Broadcasting is deliberately narrow: elementwise binary ops accept equal
shapes or a 0-d operand. Anything else must go through :meth:`Tensor.expand`.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

_node_ids = itertools.count()


class ShapeMismatch(ValueError):
    pass


class NotScalarLoss(ValueError):
    pass


class Node:
    __slots__ = ("id", "op", "inputs", "backward", "saved")

    def __init__(self, op: str, inputs: tuple, backward: Callable, saved=None):
        self.id = next(_node_ids)
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.saved = saved


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def expand(self, shape):
        return expand(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(np.asarray(float(x)))
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward: Callable, saved=None) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward, saved)
    return out


def _unbroadcast_scalar(g: np.ndarray, shape: tuple) -> np.ndarray:
    if shape == () and g.shape != ():
        return np.asarray(g.sum())
    return g


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} (only scalar broadcasting is implicit)")


# -- elementwise binary ------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data, "add", (a, b),
        lambda g: (_unbroadcast_scalar(g, sa), _unbroadcast_scalar(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(
        a.data - b.data, "sub", (a, b),
        lambda g: (_unbroadcast_scalar(g, sa), _unbroadcast_scalar(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(
        ad * bd, "mul", (a, b),
        lambda g: (_unbroadcast_scalar(g * bd, ad.shape), _unbroadcast_scalar(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(
        out, "div", (a, b),
        lambda g: (_unbroadcast_scalar(g / bd, ad.shape), _unbroadcast_scalar(-g * out / bd, bd.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


# -- elementwise unary -------------------------------------------------------
def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0  # relu'(0) = 0
    return _result(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _result(np.log(ad), "log", (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _result(np.sin(ad), "sin", (a,), lambda g: (g * np.cos(ad),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _result(np.cos(ad), "cos", (a,), lambda g: (-g * np.sin(ad),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _result(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)  # |x|'(0) = 0
    return _result(np.abs(a.data), "abs", (a,), lambda g: (g * sign,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _result(ad * ad, "square", (a,), lambda g: (2.0 * g * ad,))


# -- reductions ----------------------------------------------------------------
def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _result(
        np.sum(a.data, axis=axis, keepdims=keepdims), "sum", (a,),
        lambda g: (_expand_reduced(g, shape, axis, keepdims),),
    )


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    n = a.size if axis is None else np.prod([shape[ax] for ax in np.atleast_1d(axis)])
    return _result(
        np.mean(a.data, axis=axis, keepdims=keepdims), "mean", (a,),
        lambda g: (_expand_reduced(g / n, shape, axis, keepdims),),
    )


def l1_norm(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    sign = np.sign(a.data)
    return _result(
        np.sum(np.abs(a.data), axis=axis, keepdims=keepdims), "l1_norm", (a,),
        lambda g: (_expand_reduced(g, shape, axis, keepdims) * sign,),
    )


def l2_norm(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    ad = a.data
    out = np.sqrt(np.sum(ad * ad, axis=axis, keepdims=keepdims))

    def backward(g):
        o = _expand_reduced(out, shape, axis, keepdims)
        safe = np.where(o > 0, o, 1.0)
        return (np.where(o > 0, _expand_reduced(g, shape, axis, keepdims) * ad / safe, 0.0),)

    return _result(out, "l2_norm", (a,), backward)


def cumsum(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    return _result(
        np.cumsum(a.data, axis=axis), "cumsum", (a,),
        lambda g: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),),
    )


# -- linear algebra and shape ----------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _result(
        ad @ bd, "matmul", (a, b),
        lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g),
    )


def linear(x, w, b) -> Tensor:
    """``x @ w + b`` for x (N, i), w (i, o), b (o,); the bias is broadcast over rows."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"linear: shapes {x.shape}, {w.shape}, {b.shape}")
    xd, wd = x.data, w.data
    return _result(
        xd @ wd + b.data, "linear", (x, w, b),
        lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)),
    )


def astype(a, dtype) -> Tensor:
    a = as_tensor(a)
    src = a.dtype
    return _result(a.data.astype(dtype), "astype", (a,), lambda g: (g.astype(src),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.swapaxes(a.data, -1, -2), "transpose", (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return _result(out, "reshape", (a,), lambda g: (g.reshape(old),))


def expand(a, shape) -> Tensor:
    """Explicit numpy-style broadcast of ``a`` to ``shape``; gradients are summed back."""
    a = as_tensor(a)
    shape = tuple(shape)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeMismatch(f"expand: cannot broadcast {old} to {shape}") from None
    lead = len(shape) - len(old)
    axes = tuple(range(lead)) + tuple(i + lead for i, n in enumerate(old) if n == 1 and shape[i + lead] != 1)

    def backward(g):
        return (np.sum(g, axis=axes, keepdims=True).reshape(old) if axes else g,)

    return _result(out, "expand", (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeMismatch(f"concat: shapes {[t.shape for t in ts]} along axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=ax) for k in range(len(ts))
        )

    return _result(np.concatenate([t.data for t in ts], axis=ax), "concat", ts, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if len({t.shape for t in ts}) != 1:
        raise ShapeMismatch(f"stack: shapes {[t.shape for t in ts]}")
    ax = axis % (ts[0].ndim + 1)

    def backward(g):
        return tuple(np.take(g, k, axis=ax) for k in range(len(ts)))

    return _result(np.stack([t.data for t in ts], axis=ax), "stack", ts, backward)


def take(a, index) -> Tensor:
    """Slice or gather (``a[index]``); repeated gather indices accumulate gradient."""
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return _result(a.data[index], "slice", (a,), backward)


def slice_(a, start: int, stop: int, axis: int = 0) -> Tensor:
    index = [slice(None)] * as_tensor(a).ndim
    index[axis] = slice(start, stop)
    return take(a, tuple(index))


def where(mask: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "where")
    mask = np.asarray(mask, dtype=bool)
    return _result(
        np.where(mask, a.data, b.data), "where", (a, b),
        lambda g: (_unbroadcast_scalar(np.where(mask, g, 0.0), a.shape),
                   _unbroadcast_scalar(np.where(mask, 0.0, g), b.shape)),
    )


# -- rotation coefficient functions --------------------------------------------
_SERIES_CUTOFF = 1e-4  # on theta^2; four-term series is exact to double precision below it


def rodrigues_coefficients(theta_sq) -> tuple[Tensor, Tensor, Tensor]:
    """``A = sin(th)/th``, ``B = (1-cos th)/th^2``, ``C = (th - sin th)/th^3`` as functions of ``th^2``.

    Uses Taylor series below a small cutoff so that values and derivatives are
    smooth through ``th = 0``.
    """
    s = as_tensor(theta_sq)
    sd = s.data
    small = sd < _SERIES_CUTOFF
    th = np.sqrt(np.where(small, 1.0, sd))
    sn, cs = np.sin(th), np.cos(th)
    th2 = th * th
    a = np.where(small, 1 - sd / 6 + sd**2 / 120 - sd**3 / 5040, sn / th)
    b = np.where(small, 0.5 - sd / 24 + sd**2 / 720 - sd**3 / 40320, (1 - cs) / th2)
    c = np.where(small, 1 / 6 - sd / 120 + sd**2 / 5040 - sd**3 / 362880, (th - sn) / (th2 * th))
    da = np.where(small, -1 / 6 + sd / 60 - sd**2 / 1680, (th * cs - sn) / (2 * th2 * th))
    db = np.where(small, -1 / 24 + sd / 360 - sd**2 / 13440, (th * sn - 2 * (1 - cs)) / (2 * th2 * th2))
    dc = np.where(small, -1 / 120 + sd / 2520 - sd**2 / 120960, (th * (1 - cs) - 3 * (th - sn)) / (2 * th2 * th2 * th))
    return (
        _result(a, "rodrigues_a", (s,), lambda g: (g * da,)),
        _result(b, "rodrigues_b", (s,), lambda g: (g * db,)),
        _result(c, "rodrigues_c", (s,), lambda g: (g * dc,)),
    )


# -- backward pass -------------------------------------------------------------
class Tape:
    """Nodes reachable from a loss, in construction order."""

    def __init__(self, loss: Tensor):
        seen: dict[int, Node] = {}
        stack = [loss]
        while stack:
            t = stack.pop()
            node = t.node
            if node is None or node.id in seen:
                continue
            seen[node.id] = node
            stack.extend(node.inputs)
        self.loss = loss
        self.nodes = [seen[k] for k in sorted(seen)]

    def __len__(self):
        return len(self.nodes)

    def backward(self) -> None:
        loss = self.loss
        if loss.shape != () and loss.size != 1:
            raise NotScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            return
        cot: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
        owners: dict[int, Tensor] = {id(loss): loss}
        # map node id -> output tensor id; outputs are found through their inputs' consumers
        out_of = {loss.node.id: loss}
        for node in self.nodes:
            for t in node.inputs:
                if t.node is not None:
                    out_of[t.node.id] = t
        for node in reversed(self.nodes):
            out = out_of[node.id]
            g = cot.pop(id(out), None)
            if g is None:
                continue
            grads = node.backward(g)
            for t, gi in zip(node.inputs, grads):
                if not t.requires_grad or gi is None:
                    continue
                key = id(t)
                if key in cot:
                    cot[key] = cot[key] + gi
                else:
                    cot[key] = np.asarray(gi, dtype=t.dtype)
                    owners[key] = t
        for key, g in cot.items():
            t = owners[key]
            if t.node is None:
                t.grad = np.array(g, dtype=t.dtype) if t.grad is None else t.grad + g


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if not isinstance(loss, Tensor):
        raise NotScalarLoss("loss must be a Tensor")
    if loss.shape != () and loss.size != 1:
        raise NotScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape(loss)
    tape.backward()
    return tape
