"""Dense tensors with reverse-mode automatic differentiation.

A deliberately small engine: every op is a plain function that computes its
forward value with numpy and registers a closure mapping the output gradient
to input gradients. Nodes carry a monotonically increasing creation id, so a
reverse sort by id is a valid (and deterministic) reverse topological order.

Broadcasting is limited to ``matrix op row-vector`` on the last axis; anything
else needs an explicit reshape.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

PAD_ID = 0

_ids = itertools.count()
_state = {"dtype": np.float32, "grad_enabled": True}


class ShapeError(ValueError):
    """Incompatible operand shapes."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (e.g. backward from a non-scalar)."""


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the working float type (float64 for gradient checks)."""
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


def default_dtype():
    return _state["dtype"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data)
        if arr.dtype != _state["dtype"]:
            arr = arr.astype(_state["dtype"])
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Iterable[Tensor], backward_fn, op: str) -> Tensor:
    parents = tuple(parents)
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=parents, _backward=backward_fn, op=op)
    return Tensor(data, op=op)


def _sum_leading(g: np.ndarray, n: int) -> np.ndarray:
    return g.reshape(-1, n).sum(axis=0, dtype=np.float64).astype(g.dtype)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss`` that requires it."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in nodes or not node.requires_grad:
            continue
        nodes[node._id] = node
        stack.extend(node._parents)

    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = grads.pop(nid, None)
        if node.is_leaf:
            if g is None:
                g = np.zeros_like(node.data)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise GraphError(f"gradient shape {pg.shape} != {parent.shape} in {node.op}")
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(m,k)@(k,n) or batched (B,m,k)@(B,k,n)."""
    a, b = as_tensor(a), as_tensor(b)
    ok = a.data.ndim == b.data.ndim and a.data.ndim in (2, 3) and a.shape[-1] == b.shape[-2]
    if ok and a.data.ndim == 3:
        ok = a.shape[0] == b.shape[0]
    if not ok:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    return _make(ad @ bd, (a, b), bw, "matmul")


def _check_rowvec(a: Tensor, b: Tensor, name: str) -> bool:
    if a.shape == b.shape:
        return False
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    rowvec = _check_rowvec(a, b, "add")
    n = b.shape[0] if rowvec else 0

    def bw(g):
        return g, (_sum_leading(g, n) if rowvec else g)

    return _make(a.data + b.data, (a, b), bw, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    rowvec = _check_rowvec(a, b, "mul")
    ad, bd = a.data, b.data
    n = bd.shape[0] if rowvec else 0

    def bw(g):
        gb = g * ad
        return g * bd, (_sum_leading(gb, n) if rowvec else gb)

    return _make(ad * bd, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),), "scale")


def add_const(a: Tensor, const: np.ndarray) -> Tensor:
    """Add a constant (no-grad) array broadcastable to ``a``."""
    const = np.asarray(const, dtype=a.data.dtype)
    out = a.data + const
    if out.shape != a.shape:
        raise ShapeError(f"add_const: {const.shape} does not broadcast onto {a.shape}")
    return _make(out, (a,), lambda g: (g,), "add_const")


def hadamard_mask_apply(w: Tensor, mask: np.ndarray) -> Tensor:
    """Element-wise product with a binary mask; gradient is masked the same way."""
    m = np.asarray(mask)
    if m.shape != w.shape:
        raise ShapeError(f"mask shape {m.shape} != parameter shape {w.shape}")
    m = m.astype(w.data.dtype, copy=False)
    return _make(w.data * m, (w,), lambda g: (g * m,), "mask")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0), (a,), lambda g: (g * pos,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * d.astype(x.dtype),)

    return _make(out.astype(x.dtype), (a,), bw, "gelu")


def softmax_rowwise(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gamma.shape}/{beta.shape} vs features {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = ((xd - mu) * rstd).astype(xd.dtype)
    rstd = rstd.astype(xd.dtype)
    gd = gamma.data

    def bw(g):
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = rstd * (dxhat - m1 - xhat * m2)
        return dx, _sum_leading(g * xhat, d), _sum_leading(g, d)

    return _make(xhat * gd + beta.data, (x, gamma, beta), bw, "layer_norm")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather; backward scatter-adds in index order."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range [0, {vocab})")

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make(weight.data[ids], (weight,), bw, "embedding")


def sum_all(a: Tensor) -> Tensor:
    shape, dt = a.shape, a.data.dtype
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=dt)
    return _make(out, (a,), lambda g: (np.full(shape, g, dtype=dt),), "sum")


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int | None = PAD_ID) -> Tensor:
    """Mean negative log-likelihood (nats) over positions whose target != ignore_index.

    ``logits`` is (..., V); ``targets`` has the leading shape. Accumulation is
    float64.
    """
    V = logits.shape[-1]
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    x = logits.data.reshape(-1, V)
    if t.shape[0] != x.shape[0]:
        raise ShapeError(f"cross_entropy: {logits.shape} logits vs {np.shape(targets)} targets")
    if t.size and (t.min() < 0 or t.max() >= V):
        raise IndexError(f"target id out of range [0, {V})")
    valid = np.ones_like(t, dtype=bool) if ignore_index is None else t != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise ValueError("cross_entropy: no non-padding positions")

    x64 = x.astype(np.float64)
    m = x64.max(axis=1, keepdims=True)
    e = np.exp(x64 - m)
    z = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(z))[:, 0]
    rows = np.arange(t.shape[0])
    nll = lse - x64[rows, t]
    loss = nll[valid].sum() / count
    shape, dt = logits.shape, logits.data.dtype

    def bw(g):
        p = e / z
        p[rows, t] -= 1.0
        p[~valid] = 0.0
        p *= float(g) / count
        return (p.astype(dt).reshape(shape),)

    return _make(np.asarray(loss, dtype=dt), (logits,), bw, "cross_entropy")
