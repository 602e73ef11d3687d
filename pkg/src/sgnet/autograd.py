"""Dense tensors with a reverse-mode tape.

Every op returns a new :class:`Tensor` holding a closure that maps the output
gradient to one gradient per parent. :func:`backward` walks the graph in
reverse topological order and accumulates into leaf ``.grad`` buffers only,
so intermediate nodes never hold state between calls.

Storage defaults to float32; explicit reductions accumulate in float64.
Gradient checks switch the default to float64 with :func:`precision`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32

# Names of backward rules deliberately broken for mutation testing.
_FAULTS: set[str] = set()


class ShapeError(ValueError):
    """Raised when operand extents do not agree."""


class NumericError(ArithmeticError):
    """Raised when a value or gradient is NaN or infinite."""


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def inject_fault(name: str):
    """Corrupt the backward rule of op ``name`` while the context is active."""
    _FAULTS.add(name)
    try:
        yield
    finally:
        _FAULTS.discard(name)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype or _DEFAULT_DTYPE)


def _result(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0, dtype=np.float64).astype(g.dtype)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True, dtype=np.float64).astype(g.dtype)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), bw, "mul")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    data = np.maximum(x.data, 0)

    def bw(g):
        if "relu" in _FAULTS:
            return (g,)
        return (g * (x.data > 0),)

    return _result(data, (x,), bw, "relu")


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    data = np.tanh(x.data)

    def bw(g):
        if "tanh" in _FAULTS:
            return (g * (1 - data),)
        return (g * (1 - data * data),)

    return _result(data, (x,), bw, "tanh")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    data = _sigmoid(x.data)

    def bw(g):
        return (g * data * (1 - data),)

    return _result(data, (x,), bw, "sigmoid")


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    data = np.exp(x.data)

    def bw(g):
        return (g * data,)

    return _result(data, (x,), bw, "exp")


def sqrt(x: Tensor) -> Tensor:
    """Square root with a zero subgradient at the origin."""
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise NumericError("sqrt of a negative value")
    data = np.sqrt(x.data)

    def bw(g):
        safe = np.where(data > 0, data, 1)
        return (np.where(data > 0, g / (2 * safe), 0).astype(data.dtype),)

    return _result(data, (x,), bw, "sqrt")


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    data = x.data * x.data

    def bw(g):
        return (2 * g * x.data,)

    return _result(data, (x,), bw, "square")


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(data, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` applied over the last axis of ``x``."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} vs weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    data = out.reshape(lead + (weight.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0, dtype=np.float64).astype(g.dtype)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(data, parents, bw, "linear")


def gru_cell(x: Tensor, h: Tensor, p) -> Tensor:
    """Gated recurrent unit step with a fused backward rule.

    ``p`` provides ``w_xz, w_xr, w_xh`` (D x H), ``w_hz, w_hr, w_hh`` (H x H)
    and ``b_z, b_r, b_h`` (H).  The update is ``h' = (1 - z) * h + z * c``.
    """
    x = as_tensor(x)
    h = as_tensor(h)
    H = p.w_hz.shape[0]
    D = p.w_xz.shape[0]
    if x.ndim != 2 or h.ndim != 2 or x.shape[1] != D or h.shape[1] != H or x.shape[0] != h.shape[0]:
        raise ShapeError(f"gru_cell: x {x.shape}, h {h.shape} for D={D}, H={H}")
    xv, hv = x.data, h.data
    w_x = np.concatenate([p.w_xz.data, p.w_xr.data, p.w_xh.data], axis=1)
    gx = xv @ w_x
    gh_zr = hv @ np.concatenate([p.w_hz.data, p.w_hr.data], axis=1)
    z = _sigmoid(gx[:, :H] + gh_zr[:, :H] + p.b_z.data)
    r = _sigmoid(gx[:, H : 2 * H] + gh_zr[:, H:] + p.b_r.data)
    rh = r * hv
    c = np.tanh(gx[:, 2 * H :] + rh @ p.w_hh.data + p.b_h.data)
    data = hv + z * (c - hv)

    def bw(g):
        dz = g * (c - hv)
        dc = g * z
        dh = g * (1 - z)
        daz = dz * z * (1 - z)
        dac = dc * (1 - c * c)
        drh = dac @ p.w_hh.data.T
        dr = drh * hv
        dh = dh + drh * r
        dar = dr * r * (1 - r)
        da = np.concatenate([daz, dar, dac], axis=1)
        dx = da @ w_x.T
        dh = dh + daz @ p.w_hz.data.T + dar @ p.w_hr.data.T
        dw_x = xv.T @ da
        gsum = lambda v: v.sum(axis=0, dtype=np.float64).astype(v.dtype)  # noqa: E731
        return (
            dx,
            dh,
            dw_x[:, :H],
            dw_x[:, H : 2 * H],
            dw_x[:, 2 * H :],
            hv.T @ daz,
            hv.T @ dar,
            rh.T @ dac,
            gsum(daz),
            gsum(dar),
            gsum(dac),
        )

    parents = (x, h, p.w_xz, p.w_xr, p.w_xh, p.w_hz, p.w_hr, p.w_hh, p.b_z, p.b_r, p.b_h)
    return _result(data, parents, bw, "gru")


# ----------------------------------------------------------------------------
# reductions and normalisers


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    data = np.asarray(x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64), dtype=x.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _result(data, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    if n == 0:
        raise ShapeError("mean over an empty axis")
    data = np.asarray(x.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64), dtype=x.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, x.shape) / n).astype(x.dtype),)

    return _result(data, (x,), bw, "mean")


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` (broadcastable bool) keeps True entries."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("softmax over an empty axis")
    v = x.data
    if mask is not None:
        if not np.all(np.any(np.broadcast_to(mask, v.shape), axis=-1)):
            raise ShapeError("softmax mask leaves an empty slice")
        v = np.where(mask, v, -np.inf)
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    data = (e / e.sum(axis=-1, keepdims=True, dtype=np.float64)).astype(x.dtype)

    def bw(g):
        inner = (g * data).sum(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
        return (data * (g - inner),)

    return _result(data, (x,), bw, "softmax")


# ----------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return _result(data, (x,), bw, "reshape")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    data = np.swapaxes(x.data, a, b)

    def bw(g):
        return (np.swapaxes(g, a, b),)

    return _result(data, (x,), bw, "swapaxes")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}") from exc
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(data, tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(data, tensors, bw, "stack")


def getitem(x: Tensor, index) -> Tensor:
    x = as_tensor(x)
    data = x.data[index]
    idx = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(i, (list, np.ndarray)) for i in idx)

    def bw(g):
        out = np.zeros(x.shape, dtype=x.dtype)
        if fancy:
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return _result(data, (x,), bw, "getitem")


def take(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along ``axis`` with a (possibly repeating) integer index array."""
    x = as_tensor(x)
    indices = np.asarray(indices)
    data = np.take(x.data, indices, axis=axis)
    ax = axis % x.ndim

    def bw(g):
        out = np.zeros(x.shape, dtype=x.dtype)
        moved = np.moveaxis(out, ax, 0)
        gm = np.moveaxis(g, tuple(range(ax, ax + indices.ndim)), tuple(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (out,)

    return _result(data, (x,), bw, "take")


def repeat(x: Tensor, k: int, axis: int = 0) -> Tensor:
    """``np.repeat`` along ``axis``: each slice copied ``k`` times consecutively."""
    x = as_tensor(x)
    data = np.repeat(x.data, k, axis=axis)
    ax = axis % x.ndim

    def bw(g):
        shape = x.shape[:ax] + (x.shape[ax], k) + x.shape[ax + 1 :]
        return (g.reshape(shape).sum(axis=ax + 1, dtype=np.float64).astype(x.dtype),)

    return _result(data, (x,), bw, "repeat")


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _DEFAULT_DTYPE))


# ----------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(loss: Tensor, check_finite: bool = True) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if check_finite and not np.isfinite(loss.data).all():
        raise NumericError(f"non-finite loss {loss.data}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if check_finite and not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {node.name or node.op}")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
