"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array. Operations on tensors that require
gradients record a ``_Node`` holding the parents and a closure mapping the
upstream gradient to per-parent gradients. ``backward`` walks the recorded
graph in reverse topological order.

Only the operations needed by the vision transformer and the growth
machinery are provided; broadcasting follows numpy rules and gradients are
summed back to the operand shape.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from hetscale.cache import SharedInputCache

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class _Node:
    __slots__ = ("parents", "backward", "op", "consumed", "saved")

    def __init__(self, parents: tuple, backward: Callable, op: str):
        self.parents = parents
        self.backward = backward
        self.op = op
        self.consumed = False
        self.saved = None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "_retain", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        # ascontiguousarray would turn a 0-d scalar into shape (1,).
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self._retain = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def retain_grad(self) -> "Tensor":
        """Keep ``grad`` on this (possibly non-leaf) tensor after backward."""
        self._retain = True
        return self

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators ----------------------------------------------------------
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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and not isinstance(x, np.ndarray):
        dtype = DEFAULT_DTYPE
    return Tensor(x, dtype=dtype)


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    """Promote plain numbers/arrays to tensors of the partner's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b), dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a), dtype=b.dtype)
    elif not isinstance(a, Tensor):
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(tuple(parents), backward_fn, op)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf that requires it.

    Leaf gradients accumulate into any existing ``grad``. The graph is
    released afterwards; a second call on the same graph raises.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not participate in a gradient graph")
    if loss._node is not None and loss._node.consumed:
        raise RuntimeError("backward already ran on this graph; run a new forward pass first")

    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        if node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        if t._retain:
            t.grad = g.copy()
        parent_grads = node.backward(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for t in order:
        if t._node is not None:
            t._node.consumed = True
            t._node.backward = _consumed_backward
            t._node.saved = None


def _consumed_backward(g):
    raise RuntimeError("graph already consumed by backward")


def grad_of(loss_fn: Callable[[Tensor], Tensor], params: np.ndarray) -> np.ndarray:
    """Gradient of ``loss_fn`` at ``params`` (a fresh leaf is created)."""
    p = Tensor(params, requires_grad=True, dtype=params.dtype)
    loss = loss_fn(p)
    backward(loss)
    if p.grad is None:
        return np.zeros_like(p.data)
    return p.grad


def hvp(loss_fn: Callable[[Tensor], Tensor], params, v) -> np.ndarray:
    """Hessian-vector product by central differences of gradients.

    ``(grad(p + eps v) - grad(p - eps v)) / (2 eps)`` with
    ``eps = 1e-3 * max(1, |p|_inf)``.
    """
    params = np.asarray(params)
    if params.dtype not in (np.float32, np.float64):
        params = params.astype(np.float64)
    v = np.asarray(v, dtype=params.dtype)
    if v.shape != params.shape:
        raise ValueError(f"direction shape {v.shape} does not match params shape {params.shape}")
    scale = float(np.max(np.abs(params))) if params.size else 0.0
    eps = 1e-3 * max(1.0, scale)
    g_plus = grad_of(loss_fn, params + eps * v)
    g_minus = grad_of(loss_fn, params - eps * v)
    if not (np.all(np.isfinite(g_plus)) and np.all(np.isfinite(g_minus))):
        raise FloatingPointError("non-finite gradient in hvp")
    return (g_plus - g_minus) / (2.0 * eps)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)
    return _make(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.ascontiguousarray(a.data[index]), (a,), bw, "getitem")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, old),), "broadcast")


def scatter_add(base: Tensor, index: np.ndarray, values: Tensor) -> Tensor:
    """``out = base; out[..., index] += values`` along the last axis.

    ``index`` must not contain duplicates.
    """
    index = np.asarray(index, dtype=np.intp)
    out = base.data.copy()
    out[..., index] += values.data

    def bw(g):
        return g, np.ascontiguousarray(g[..., index])

    return _make(out, (base, values), bw, "scatter_add")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """numpy ``matmul`` semantics for operands of rank >= 1."""
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    a_vec, b_vec = ad.ndim == 1, bd.ndim == 1
    a2 = ad[None, :] if a_vec else ad
    b2 = bd[:, None] if b_vec else bd

    def bw(g):
        g2 = g
        if a_vec and b_vec:
            g2 = np.reshape(g, (1, 1))
        elif a_vec:
            g2 = np.expand_dims(g, -2)
        elif b_vec:
            g2 = np.expand_dims(g, -1)
        ga = gb = None
        if a.requires_grad:
            ga = g2 @ np.swapaxes(b2, -1, -2)
            ga = _unbroadcast(ga, a2.shape)
            ga = ga.reshape(ad.shape)
        if b.requires_grad:
            gb = np.swapaxes(a2, -1, -2) @ g2
            gb = _unbroadcast(gb, b2.shape)
            gb = gb.reshape(bd.shape)
        return ga, gb

    return _make(np.matmul(ad, bd), (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           cache: SharedInputCache | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` over the last axis of ``x``.

    The input is saved for the weight gradient. With a ``cache``, layers
    consuming the same input share one saved copy; without it every call
    keeps its own copy.
    """
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = x.data @ weight.data.T
    if bias is not None:
        out += bias.data
    recording = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not recording:
        return Tensor(out, dtype=out.dtype)

    in_dim = weight.shape[1]
    if weight.requires_grad:
        saved = cache.register(x) if cache is not None else x.data.copy()
    else:
        saved = None
    wd = weight.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ wd) if x.requires_grad else None
        gw = gb = None
        if weight.requires_grad:
            gw = g2.T @ saved.reshape(-1, in_dim)
            if cache is not None:
                cache.release(saved)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gw) if bias is None else (gx, gw, gb)

    t = _make(out, parents, bw, "linear")
    t._node.saved = saved
    return t


# ---------------------------------------------------------------------------
# Nonlinearities and normalization
# ---------------------------------------------------------------------------


def gelu_np(z: np.ndarray) -> np.ndarray:
    return 0.5 * z * (1.0 + erf(z / _SQRT2))


def gelu_grad_np(z: np.ndarray) -> np.ndarray:
    """d/dz gelu(z) = Phi(z) + z phi(z)."""
    cdf = 0.5 * (1.0 + erf(z / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    return cdf + z * pdf


def gelu_second_np(z: np.ndarray) -> np.ndarray:
    """d^2/dz^2 gelu(z) = phi(z) (2 - z^2)."""
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    return pdf * (2.0 - z * z)


def gelu(z: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    zd = z.data
    cdf = 0.5 * (1.0 + erf(zd * zd.dtype.type(1.0 / _SQRT2)))
    out = zd * cdf

    def bw(g):
        pdf = np.exp(zd * zd * zd.dtype.type(-0.5)) * zd.dtype.type(_INV_SQRT_2PI)
        return (g * (cdf + zd * pdf),)

    return _make(out, (z,), bw, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    n = xd.shape[-1]

    def bw(g):
        gxhat = g * gamma.data
        gx = None
        if x.requires_grad:
            gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                         - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / n)
        gg = (g * xhat).reshape(-1, n).sum(axis=0) if gamma.requires_grad else None
        gb = g.reshape(-1, n).sum(axis=0) if beta.requires_grad else None
        return gx, gg, gb

    return _make(out.astype(xd.dtype, copy=False), (x, gamma, beta), bw, "layer_norm")


def cross_entropy(logits: Tensor, labels: np.ndarray, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy over the last axis of 2-D ``logits``."""
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    labels = np.asarray(labels, dtype=np.intp)
    ld = logits.data
    if ld.ndim != 2 or labels.shape != (ld.shape[0],):
        raise ValueError(f"cross_entropy expects (N, C) logits and (N,) labels, got {ld.shape}, {labels.shape}")
    n = ld.shape[0]
    shifted = ld - ld.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(n)
    total = -logp[rows, labels].sum()
    scale = 1.0 / n if reduction == "mean" else 1.0
    value = np.asarray(total * scale, dtype=ld.dtype)

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return ((p * (g * scale)).astype(ld.dtype, copy=False),)

    return _make(value, (logits,), bw, "cross_entropy")


def saved_input_buffers(root: Tensor) -> int:
    """Count distinct input buffers saved by ``linear`` nodes in a graph."""
    ids = set()
    for t in _topo_order(root):
        node = t._node
        if node is not None and node.op == "linear" and node.saved is not None:
            ids.add(id(node.saved))
    return len(ids)
