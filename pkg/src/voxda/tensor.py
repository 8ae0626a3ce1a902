"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure computing the vector-Jacobian product.  Nodes receive a monotonically
increasing id at creation, so parents always carry a smaller id than their
children and a reverse sort by id is a valid topological order.

Broadcasting is limited to scalar-with-tensor; use :func:`expand` and
:func:`reshape` for anything else.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Iterator, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DEFAULT_DTYPE = np.float32
_ids = itertools.count()

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the default precision (``float64`` for gradient checks)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def _contig(a: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d arrays to 1-d
    return a if a.flags.c_contiguous else a.copy()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_id")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _contig(np.asarray(data, dtype=dtype or _DEFAULT_DTYPE))
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], tuple]] = None
        self.op = "leaf"
        self._id = next(_ids)

    # -- basic properties -------------------------------------------------
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

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators --------------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward_fn, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._id = next(_ids)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor with requires_grad=True")

    nodes = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in nodes:
            continue
        nodes[node._id] = node
        stack.extend(p for p in node._parents if p.requires_grad)

    grads = {loss._id: np.ones_like(loss.data)}
    for node_id in sorted(nodes, reverse=True):
        node = nodes[node_id]
        g = grads.pop(node_id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _is_scalar(t: Tensor) -> bool:
    return t.ndim == 0


def _binary_operands(a, b, name):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError(f"{name}: at least one operand must be a Tensor")
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_reduce_to(g, a), _reduce_to(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_reduce_to(g, a), _reduce_to(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_reduce_to(g * bd, a), _reduce_to(g * ad, b)), "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    x = a.data
    neg_part = alpha * np.expm1(np.minimum(x, 0))
    out = np.where(x > 0, x, neg_part).astype(x.dtype)
    slope = np.where(x > 0, 1.0, neg_part + alpha).astype(x.dtype)
    return _make(out, (a,), lambda g: (g * slope,), "elu")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    return _make(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1 - t * t),), "tanh")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,), "exp")


def softplus(a: Tensor) -> Tensor:
    """``log(1 + exp(x))`` evaluated without overflow."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid_np(x),), "softplus")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clip")


def grl(x: Tensor, lam: float) -> Tensor:
    """Gradient reversal: identity forward, ``-lam * g`` backward."""
    if lam < 0:
        raise ValueError(f"grl lambda must be >= 0, got {lam}")
    factor = x.data.dtype.type(-lam)
    return _make(x.data, (x,), lambda g: (g * factor,), "grl")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "relu": relu,
    "elu": elu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "log": log,
    "exp": exp,
    "softplus": softplus,
    "scale": scale,
}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name; ``b`` is the second operand or, for ``scale``, the constant."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    if kind in ("add", "sub", "mul", "scale"):
        if b is None:
            raise ValueError(f"{kind} needs a second operand")
        return fn(a, b)
    return fn(a)


# ---------------------------------------------------------------------------
# shape / reduction
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(_contig(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),), "transpose")


def expand(a: Tensor, shape) -> Tensor:
    """Broadcast ``a`` (size-1 axes, or a prefix-aligned smaller rank) to ``shape``."""
    shape = tuple(shape)
    if a.ndim != len(shape):
        raise ShapeError(f"expand: rank mismatch {a.shape} -> {shape}")
    for s, t in zip(a.shape, shape):
        if s != t and s != 1:
            raise ShapeError(f"expand: cannot expand {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)
    old = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (g.sum(axis=axes, keepdims=True).reshape(old),), "expand")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    old = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(old))

    def bw(g):
        return (np.broadcast_to(g.reshape(kept), old).copy(),)

    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _make(np.asarray(out, dtype=a.dtype), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    soft = e / s
    return _make(out, (a,), lambda g: (np.expand_dims(g, axis) * soft,), "logsumexp")


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """``a / max(||a||, eps)`` along ``axis``."""
    x = a.data
    norm = np.maximum(np.sqrt(np.sum(x * x, axis=axis, keepdims=True)), eps)
    y = x / norm

    def bw(g):
        return ((g - y * np.sum(g * y, axis=axis, keepdims=True)) / norm,)

    return _make(y, (a,), bw, "l2_normalize")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def index_select(a: Tensor, index) -> Tensor:
    """``a[index]`` for any numpy index; the gradient scatters back with ``np.add.at``."""
    out = a.data[index]
    basic = isinstance(index, (slice, int)) or (
        isinstance(index, tuple) and all(isinstance(i, (slice, int)) for i in index))

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(_contig(np.asarray(out)), (a,), bw, "index")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


# ---------------------------------------------------------------------------
# convolutions (cross-correlation, no kernel flip)
# ---------------------------------------------------------------------------

def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _windows(offset, stride, out_sp):
    return tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offset, out_sp))


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    nd = x.ndim - 2
    return np.pad(x, [(0, 0), (0, 0)] + [(pad, pad)] * nd)


def im2col(x: np.ndarray, kshape, stride: int, pad: int):
    """(N, C, *S) -> columns of shape (C * prod(K), N * prod(O)), plus the extents O."""
    nd = len(kshape)
    out_sp = tuple(_out_extent(s, k, stride, pad) for s, k in zip(x.shape[2:], kshape))
    if any(o <= 0 for o in out_sp):
        raise ShapeError(f"conv: non-positive output extent {out_sp} for input {x.shape}, kernel {tuple(kshape)}")
    view = sliding_window_view(_pad(x, pad), tuple(kshape), axis=tuple(range(2, 2 + nd)))
    view = view[(slice(None), slice(None)) + (slice(None, None, stride),) * nd]
    order = (1,) + tuple(range(2 + nd, 2 + 2 * nd)) + (0,) + tuple(range(2, 2 + nd))
    cols = view.transpose(order).reshape(x.shape[1] * int(np.prod(kshape)), -1)
    return cols, out_sp


def col2im(cols: np.ndarray, channels: int, kshape, n: int, out_sp, stride: int, pad: int, in_sp) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back to an (N, C, *in_sp) array."""
    cols = cols.reshape((channels,) + tuple(kshape) + (n,) + tuple(out_sp))
    padded = tuple(s + 2 * pad for s in in_sp)
    acc = np.zeros((channels, n) + padded, dtype=cols.dtype)
    for off in itertools.product(*(range(k) for k in kshape)):
        acc[(slice(None), slice(None)) + _windows(off, stride, out_sp)] += cols[(slice(None),) + off]
    if pad:
        acc = acc[(slice(None), slice(None)) + tuple(slice(pad, pad + s) for s in in_sp)]
    return np.ascontiguousarray(acc.swapaxes(0, 1))


def _channels_first(a: np.ndarray) -> np.ndarray:
    """(N, C, *S) -> (C, N * prod(S))."""
    return a.swapaxes(0, 1).reshape(a.shape[1], -1)


def _from_channels_first(a: np.ndarray, n: int, spatial) -> np.ndarray:
    return np.ascontiguousarray(a.reshape((a.shape[0], n) + tuple(spatial)).swapaxes(0, 1))


def _conv(x: Tensor, w: Tensor, stride: int, pad: int, nd: int, name: str) -> Tensor:
    if x.ndim != nd + 2 or w.ndim != nd + 2:
        raise ShapeError(f"{name}: expected {nd + 2}-D input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"{name}: input channels {x.shape[1]} != kernel channels {w.shape[1]}")
    xd, wd = x.data, w.data
    n, kshape = xd.shape[0], wd.shape[2:]
    cols, out_sp = im2col(xd, kshape, stride, pad)
    w2 = wd.reshape(wd.shape[0], -1)
    out = _from_channels_first(w2 @ cols, n, out_sp)

    def bw(g):
        g2 = _channels_first(g)
        dx = dw = None
        if x.requires_grad:
            dx = col2im(w2.T @ g2, xd.shape[1], kshape, n, out_sp, stride, pad, xd.shape[2:])
        if w.requires_grad:
            dw = (g2 @ cols.T).reshape(wd.shape)
        return dx, dw

    return _make(out, (x, w), bw, name)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    return _conv(x, w, stride, pad, 2, "conv2d")


def conv3d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    return _conv(x, w, stride, pad, 3, "conv3d")


def conv_transpose3d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed 3-D convolution; ``w`` is laid out (C_in, F_out, k, k, k)."""
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv_transpose3d: expected 5-D input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose3d: input channels {x.shape[1]} != kernel rows {w.shape[0]}")
    out_sp = tuple((s - 1) * stride - 2 * pad + k for s, k in zip(x.shape[2:], w.shape[2:]))
    if any(o <= 0 for o in out_sp):
        raise ShapeError(f"conv_transpose3d: non-positive output extent {out_sp}")
    xd, wd = x.data, w.data
    n, f, kshape = xd.shape[0], wd.shape[1], wd.shape[2:]
    x2 = _channels_first(xd)
    w2 = wd.reshape(wd.shape[0], -1)
    out = col2im(w2.T @ x2, f, kshape, n, xd.shape[2:], stride, pad, out_sp)

    def bw(g):
        cols, _ = im2col(g, kshape, stride, pad)
        dx = _from_channels_first(w2 @ cols, n, xd.shape[2:]) if x.requires_grad else None
        dw = (x2 @ cols.T).reshape(wd.shape) if w.requires_grad else None
        return dx, dw

    return _make(out, (x, w), bw, "conv_transpose3d")


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, mode: str = "train",
              running_mean: Optional[np.ndarray] = None,
              running_var: Optional[np.ndarray] = None,
              momentum: float = BN_MOMENTUM, eps: float = BN_EPS,
              stat_rows: Optional[int] = None) -> Tensor:
    """Per-channel normalization over every axis except 1.

    In train mode the running statistics (if given) are updated in place.
    ``stat_rows=k`` takes the batch statistics from the first ``k`` rows only
    and applies them to every row.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.ndim < 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    c = x.shape[1]
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xd = x.data
    k = x.shape[0] if stat_rows is None else int(stat_rows)
    if not 0 < k <= x.shape[0]:
        raise ValueError(f"stat_rows must lie in [1, {x.shape[0]}], got {stat_rows}")
    m = (xd.size // c) * k // x.shape[0]

    if mode == "train":
        if k < 2:
            raise ValueError(f"batchnorm in train mode needs N >= 2, got N={k}")
        mu = xd[:k].mean(axis=axes)
        var = xd[:k].var(axis=axes)
        if running_mean is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mu
        if running_var is not None:
            running_var *= 1 - momentum
            running_var += momentum * var * (m / (m - 1))
    else:
        if running_mean is None or running_var is None:
            raise ValueError("eval mode requires running statistics")
        mu, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)

    invstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape)) * invstd.reshape(bshape)
    gd, bd = gamma.data, beta.data
    out = xhat * gd.reshape(bshape) + bd.reshape(bshape)

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gd.reshape(bshape)
        if mode == "train":
            # the statistics depend on the first k rows only, but every row's output depends on them
            s1 = dxhat.sum(axis=axes).reshape(bshape)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            dx = dxhat * invstd.reshape(bshape)
            dx[:k] -= (invstd.reshape(bshape) / m) * (s1 + xhat[:k] * s2)
        else:
            dx = dxhat * invstd.reshape(bshape)
        return dx.astype(xd.dtype), dgamma, dbeta

    return _make(out.astype(xd.dtype), (x, gamma, beta), bw, "batchnorm")
