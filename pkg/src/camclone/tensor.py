"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tape`` records every operation applied to tensors created from it; calling
:func:`backward` on a scalar walks the record once in reverse and accumulates
vector-Jacobian products into per-node gradients.  Tensors are immutable views:
the numpy buffer backing a ``Tensor`` is marked read-only, and every op returns
a fresh tensor.  Tapes are independent objects, so separate tapes on separate
threads never share state.

The op set is deliberately small: arithmetic, matmul, shape ops, softmax,
layer norm, gelu, and mse loss cover the whole model in this package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ShapeError",
    "Parameter",
    "Tape",
    "Tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "reshape",
    "permute",
    "concat",
    "gather_rows",
    "softmax",
    "layer_norm",
    "gelu",
    "mse_loss",
    "sum_all",
    "mean_all",
    "backward",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


@dataclass
class Parameter:
    """A named, mutable weight array.  Not itself a tensor: attach it to a
    tape with :meth:`Tape.watch` to get a differentiable leaf."""

    name: str
    value: np.ndarray
    trainable: bool = True

    def __post_init__(self):
        self.value = np.asarray(self.value)
        if self.value.dtype not in (np.float32, np.float64):
            raise TypeError(f"parameter {self.name}: dtype must be float32 or float64")


class _Node:
    __slots__ = ("parents", "vjp")

    def __init__(self, parents, vjp):
        self.parents = parents  # tuple of node indices
        self.vjp = vjp  # grad_out -> tuple of parent grads (or None per parent)


class Tensor:
    """Immutable array node on a tape (or a free constant when ``tape`` is None)."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape=None, node=-1):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.flags.writeable:
            arr = arr.copy()
            arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = "const" if self.tape is None else f"node {self.node}"
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, {tag})"

    # operator sugar; constants are lifted automatically
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, key):
        return _slice(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Operation record.  One tape per forward pass; ``backward`` fills
    ``self.grads`` (indexed by node) and the per-parameter view is available
    through :meth:`grad`."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: list[np.ndarray | None] | None = None
        self._param_leaves: dict[int, Tensor] = {}

    def _record(self, data, parents, vjp) -> Tensor:
        self.nodes.append(_Node(parents, vjp))
        return Tensor(data, self, len(self.nodes) - 1)

    def leaf(self, array) -> Tensor:
        """Track a raw array as a differentiable leaf."""
        return self._record(array, (), None)

    def watch(self, param: Parameter) -> Tensor:
        """Leaf for a parameter.  Watching the same parameter twice returns the
        same leaf, so gradients from multiple uses accumulate in one slot."""
        key = id(param)
        t = self._param_leaves.get(key)
        if t is None:
            t = self.leaf(param.value)
            self._param_leaves[key] = t
        return t

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward() target w.r.t. tensor ``t``.
        Zero for nodes the loss does not reach."""
        if self.grads is None:
            raise RuntimeError("backward() has not been called on this tape")
        if t.tape is not self:
            raise ValueError("tensor does not belong to this tape")
        g = self.grads[t.node]
        if g is None:
            return np.zeros_like(t.data)
        return g

    def param_grad(self, param: Parameter) -> np.ndarray:
        t = self._param_leaves.get(id(param))
        if t is None:
            return np.zeros_like(param.value)
        return self.grad(t)


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss.  Visits each recorded node exactly
    once, in reverse recording order; after the call ``loss.tape.grads`` holds
    d loss / d node for every node (None where unreached)."""
    tape = loss.tape
    if tape is None:
        raise ValueError("backward target is a constant, not a tape node")
    if loss.data.ndim != 0:
        raise ShapeError(f"backward target must be scalar, got shape {loss.data.shape}")
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[loss.node] = np.ones((), dtype=loss.data.dtype)
    for idx in range(loss.node, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        node = tape.nodes[idx]
        if node.vjp is None:
            continue
        parent_grads = node.vjp(g)
        for pidx, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            if grads[pidx] is None:
                grads[pidx] = pg
            else:
                # out-of-place: stored grads may be views of downstream grads
                grads[pidx] = grads[pidx] + pg
    tape.grads = grads


# ---------------------------------------------------------------------------
# op plumbing

def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _join_tape(*tensors) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ValueError("operands come from different tapes")
            tape = t.tape
    return tape


def _result(tape, data, inputs, vjp) -> Tensor:
    """Record an op if any input is tracked; otherwise return a constant."""
    if tape is None:
        return Tensor(data)
    parents = tuple(t.node for t in inputs)
    mask = tuple(t.tape is not None for t in inputs)
    tracked_parents = tuple(p for p, m in zip(parents, mask) if m)

    def masked_vjp(g):
        full = vjp(g)
        return tuple(pg for pg, m in zip(full, mask) if m)

    return tape._record(data, tracked_parents, masked_vjp)


def _check_broadcast(sa, sb):
    """Numpy-style broadcast, restricted: aligned trailing dims must be equal
    or one of them 1; differing ranks allowed."""
    for da, db in zip(reversed(sa), reversed(sb)):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"shapes {sa} and {sb} do not broadcast")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", np.float32))
    b = _lift(b, a.dtype)
    _check_broadcast(a.shape, b.shape)
    tape = _join_tape(a, b)
    data = a.data + b.data
    sa, sb = a.shape, b.shape
    return _result(tape, data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", np.float32))
    b = _lift(b, a.dtype)
    _check_broadcast(a.shape, b.shape)
    tape = _join_tape(a, b)
    data = a.data - b.data
    sa, sb = a.shape, b.shape
    return _result(tape, data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", np.float32))
    b = _lift(b, a.dtype)
    _check_broadcast(a.shape, b.shape)
    tape = _join_tape(a, b)
    ad, bd = a.data, b.data
    data = ad * bd
    sa, sb = a.shape, b.shape
    return _result(
        tape, data, (a, b),
        lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)),
    )


def scale(x, c: float) -> Tensor:
    x = _lift(x, np.float32)
    c = float(c)
    return _result(x.tape, x.data * x.dtype.type(c), (x,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", np.float32))
    b = _lift(b, a.dtype)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ShapeError("matmul operands must have rank >= 1")
    ka = ad.shape[-1]
    kb = bd.shape[-2] if bd.ndim > 1 else bd.shape[0]
    if ka != kb:
        raise ShapeError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    if ad.ndim > 2 and bd.ndim > 2:
        _check_broadcast(ad.shape[:-2], bd.shape[:-2])
    data = ad @ bd
    tape = _join_tape(a, b)

    def vjp(g):
        # promote rank-1 operands to rank 2 so one transpose rule covers all
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        if ad.ndim == 1:
            ga = ga.reshape(-1)[: ad.shape[0]] if ga.ndim == 1 else np.squeeze(ga, -2)
        if bd.ndim == 1:
            gb = np.squeeze(gb, -1)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(tape, data, (a, b), vjp)


# ---------------------------------------------------------------------------
# shape ops

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = x.shape
    data = x.data.reshape(shape)
    return _result(x.tape, data, (x,), lambda g: (g.reshape(old),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute axes {axes} invalid for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    data = np.transpose(x.data, axes)
    return _result(x.tape, data, (x,), lambda g: (np.transpose(g, inv),))


def _slice(x: Tensor, key) -> Tensor:
    data = x.data[key]
    if data.base is not None:
        data = data.copy()
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        out = np.zeros(shape, dtype=dtype)
        out[key] = g
        return (out,)

    return _result(x.tape, data, (x,), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t, np.float32) for t in tensors]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    tape = _join_tape(*tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(tape, data, tuple(tensors), vjp)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of a 2-d table selected by integer ids."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2 or ids.ndim != 1:
        raise ShapeError("gather_rows expects a 2-d table and 1-d ids")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("gather_rows id out of range")
    data = table.data[ids]
    shape, dtype = table.shape, table.dtype

    def vjp(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, ids, g)
        return (out,)

    return _result(table.tape, data, (table,), vjp)


# ---------------------------------------------------------------------------
# nonlinearities and reductions

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - inner),)

    return _result(x.tape, s, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise affine.
    A constant input vector normalizes to zeros (then bias)."""
    gain = _lift(gain, x.dtype)
    bias = _lift(bias, x.dtype)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError("layer_norm gain/bias must match the last axis")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data
    gd = gain.data
    tape = _join_tape(x, gain, bias)

    def vjp(g):
        dgain = (g * xhat).reshape(-1, n).sum(axis=0)
        dbias = g.reshape(-1, n).sum(axis=0)
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgain, dbias

    return _result(tape, data, (x, gain, bias), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation gelu (differentiable everywhere)."""
    xd = x.data
    u = _GELU_C * (xd + _GELU_A * xd**3)
    th = np.tanh(u)
    data = 0.5 * xd * (1.0 + th)

    def vjp(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * xd * xd)
        dy = 0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * du
        return (g * dy,)

    return _result(x.tape, data.astype(xd.dtype, copy=False), (x,), vjp)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over all elements; scalar output.
    Shapes must match exactly (no broadcasting: a silent broadcast here is
    always a bug upstream)."""
    target = _lift(target, pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    data = np.asarray((diff * diff).mean(), dtype=pred.dtype)
    tape = _join_tape(pred, target)

    def vjp(g):
        base = (2.0 / n) * diff * g
        return base, -base

    return _result(tape, data, (pred, target), vjp)


def sum_all(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.dtype
    data = np.asarray(x.data.sum(), dtype=dtype)
    return _result(x.tape, data, (x,), lambda g: (np.full(shape, g, dtype=dtype),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    shape, dtype = x.shape, x.dtype
    data = np.asarray(x.data.mean(), dtype=dtype)
    return _result(x.tape, data, (x,), lambda g: (np.full(shape, g / n, dtype=dtype),))
