"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every operation returns a :class:`Tensor`; when any input requires gradients the
result keeps a reference to its inputs and a backward rule, forming a dynamic
graph that :func:`backward` walks in reverse topological order.

Training runs in float32 by default. Gradient checks switch to float64 with the
:func:`precision` context manager.
"""
import contextlib
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .errors import DomainError, NotScalar, ShapeMismatch

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (sampling, evaluation)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """An n-dimensional array node in the differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"
        self.name = name

    # -- array protocol -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
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
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def __len__(self):
        return len(self.data)

    # -- operators --------------------------------------------------------
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

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value), dtype=dtype or _DEFAULT_DTYPE)


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    out.op = op
    return out


def _pair(a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _broadcast_shape(*shapes) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast shapes {shapes}") from exc


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded to reach ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise binary ---------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    out = a.data / b.data

    def backward(g):
        return unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), backward, "div")


def maximum(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise maximum; ties send the gradient to ``a``."""
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    pick_a = a.data >= b.data

    def backward(g):
        return unbroadcast(g * pick_a, a.shape), unbroadcast(g * ~pick_a, b.shape)

    return _result(np.maximum(a.data, b.data), (a, b), backward, "maximum")


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


# -- elementwise unary ------------------------------------------------------

def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log requires strictly positive input")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.data)
    return _result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def elu(a: ArrayLike, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    positive = a.data > 0
    out = np.where(positive, a.data, alpha * np.expm1(np.minimum(a.data, 0)))

    def backward(g):
        return (g * np.where(positive, 1, out + alpha).astype(a.dtype),)

    return _result(out.astype(a.dtype, copy=False), (a,), backward, "elu")


def softplus(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(np.zeros((), a.dtype), a.data)
    return _result(out, (a,), lambda g: (g * special.expit(a.data),), "softplus")


def log1mexp(a: ArrayLike) -> Tensor:
    """``log(1 - exp(a))`` for ``a < 0``, accurate near both ends."""
    a = as_tensor(a)
    if np.any(a.data >= 0):
        raise DomainError("log1mexp requires strictly negative input")
    x = a.data
    near_zero = x > -np.log(2.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(near_zero, np.log(-np.expm1(x)), np.log1p(-np.exp(x)))

    def backward(g):
        with np.errstate(over="ignore"):
            return (g * (-1.0 / np.expm1(-x)),)

    return _result(out.astype(a.dtype, copy=False), (a,), backward, "log1mexp")


def clip(a: ArrayLike, low: float, high: float) -> Tensor:
    """Clamp to ``[low, high]``; the gradient is zero where the clamp is active."""
    a = as_tensor(a)
    inside = (a.data >= low) & (a.data <= high)
    return _result(np.clip(a.data, low, high), (a,), lambda g: (g * inside,), "clip")


def floor(a: ArrayLike) -> Tensor:
    """Rounding down. Its gradient is defined as zero everywhere."""
    a = as_tensor(a)
    return _result(np.floor(a.data), (a,), lambda g: (np.zeros_like(g),), "floor")


# -- linear algebra -----------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul of {a.shape} and {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2])

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def _padding_pairs(padding) -> Tuple[Tuple[int, int], Tuple[int, int]]:
    if isinstance(padding, (int, np.integer)):
        return (int(padding), int(padding)), (int(padding), int(padding))
    (top, bottom), (left, right) = padding
    return (int(top), int(bottom)), (int(left), int(right))


def _conv_geometry(x: Tensor, w: Tensor, stride: int, pads):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    if x.shape[3] != w.shape[2]:
        raise ShapeMismatch(f"conv2d channel mismatch: input {x.shape[3]}, kernel {w.shape[2]}")
    n, h, wd, _ = x.shape
    kh, kw = w.shape[:2]
    ho = (h + sum(pads[0]) - kh) // stride + 1
    wo = (wd + sum(pads[1]) - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"kernel {kh}x{kw} larger than padded input {h}x{wd}")
    return n, ho, wo, kh, kw


def conv2d(x: ArrayLike, w: ArrayLike, stride: int = 1, padding=0) -> Tensor:
    """2-d cross-correlation in channels-last layout.

    ``x`` is (N, H, W, C) and ``w`` is (kh, kw, C, O); the result is
    (N, Ho, Wo, O). ``padding`` is an int or ((top, bottom), (left, right)).
    Implemented as one matrix product over gathered patches.
    """
    x, w = _pair(x, w)
    pads = _padding_pairs(padding)
    n, ho, wo, kh, kw = _conv_geometry(x, w, stride, pads)
    c, o = w.shape[2], w.shape[3]
    padded = any(pads[0]) or any(pads[1])
    xp = np.pad(x.data, ((0, 0), pads[0], pads[1], (0, 0))) if padded else x.data
    taps = [(i, j) for i in range(kh) for j in range(kw)]
    if kh == kw == 1 and stride == 1:
        cols = xp.reshape(n * ho * wo, c)
    else:
        cols = np.concatenate([xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] for i, j in taps],
                              axis=-1).reshape(n * ho * wo, kh * kw * c)
    wmat = w.data.reshape(kh * kw * c, o)
    out = (cols @ wmat).reshape(n, ho, wo, o)

    def backward(g):
        gmat = g.reshape(n * ho * wo, o)
        gw = (cols.T @ gmat).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat.T).reshape(n, ho, wo, kh * kw, c)
            if kh == kw == 1 and stride == 1:
                gxp = gcols.reshape(xp.shape)
            else:
                gxp = np.zeros(xp.shape, dtype=g.dtype)
                for t, (i, j) in enumerate(taps):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, t, :]
            top, left = pads[0][0], pads[1][0]
            gx = gxp[:, top:top + x.shape[1], left:left + x.shape[2], :] if padded else gxp
        return gx, gw

    return _result(out, (x, w), backward, "conv2d")


# -- shape manipulation ----------------------------------------------------------

def reshape(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: ArrayLike, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, backward, "concat")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def slice_(a: ArrayLike, index) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), backward, "slice")


def pad(a: ArrayLike, pad_width) -> Tensor:
    """Zero padding; ``pad_width`` follows :func:`numpy.pad`."""
    a = as_tensor(a)
    pad_width = np.broadcast_to(np.asarray(pad_width, dtype=int), (a.ndim, 2))
    index = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.shape))
    return _result(np.pad(a.data, pad_width), (a,), lambda g: (g[index],), "pad")


def broadcast_to(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    return _result(np.ascontiguousarray(out), (a,), lambda g: (unbroadcast(g, a.shape),), "broadcast")


def upsample_nearest(a: ArrayLike, factor) -> Tensor:
    """Nearest-neighbour upsampling of the spatial axes of an NHWC tensor.

    ``factor`` is an int or a (vertical, horizontal) pair.
    """
    a = as_tensor(a)
    fh, fw = (factor, factor) if isinstance(factor, int) else factor
    if fh == 1 and fw == 1:
        return a
    n, h, w, c = a.shape
    wide = broadcast_to(reshape(a, (n, h, 1, w, 1, c)), (n, h, fh, w, fw, c))
    return reshape(wide, (n, h * fh, w * fw, c))


# -- reductions -------------------------------------------------------------------

def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand(g: np.ndarray, shape, axes, keepdims) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)
    return _result(np.asarray(out), (a,), lambda g: (_expand(g, a.shape, axes, keepdims),), "sum")


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = np.sum(a.data, axis=axes, keepdims=keepdims) / a.dtype.type(count)

    def backward(g):
        return (_expand(g / g.dtype.type(count), a.shape, axes, keepdims),)

    return _result(np.asarray(out, dtype=a.dtype), (a,), backward, "mean")


def logsumexp(a: ArrayLike, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Log-sum-exp along one axis with max subtraction."""
    a = as_tensor(a)
    peak = np.max(a.data, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0)
    shifted = np.exp(a.data - peak)
    total = np.sum(shifted, axis=axis, keepdims=True)
    out = np.log(total) + peak
    weights = shifted / total

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return _result(np.asarray(out), (a,), backward, "logsumexp")


# -- graph traversal --------------------------------------------------------------

def _topological_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(scalar: Tensor) -> Dict[Tensor, np.ndarray]:
    """Accumulate d(scalar)/d(leaf) into every reachable leaf's ``grad``.

    Returns a map from each reached leaf to the gradient contributed by this
    call. Leaves that the scalar does not depend on are simply absent (their
    gradient is zero).
    """
    if scalar.size != 1:
        raise NotScalar(f"backward needs a single-element tensor, got shape {scalar.shape}")
    if not scalar.requires_grad:
        return {}
    grads = {id(scalar): np.ones(scalar.shape, dtype=scalar.dtype)}
    leaves = {}
    for node in reversed(_topological_order(scalar)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    for leaf, g in leaves.items():
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return leaves


def grad_check(fn: Callable[..., Tensor], point: Union[ArrayLike, Iterable[ArrayLike]], epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` receives one float64 tensor per entry of ``point`` and returns a
    scalar tensor. The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic| + |numeric|)``.
    """
    if isinstance(point, (Tensor, np.ndarray, float, int)):
        arrays = [np.asarray(point.data if isinstance(point, Tensor) else point, dtype=np.float64)]
    else:
        arrays = [np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64) for p in point]
    arrays = [a.copy() for a in arrays]
    with precision(np.float64):
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        backward(fn(*leaves))
        analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

        def evaluate():
            with no_grad():
                return float(fn(*[Tensor(a) for a in arrays]).data)

        worst = 0.0
        for a, grad in zip(arrays, analytic):
            flat = a.reshape(-1)
            gflat = grad.reshape(-1)
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + epsilon
                up = evaluate()
                flat[i] = saved - epsilon
                down = evaluate()
                flat[i] = saved
                numeric = (up - down) / (2 * epsilon)
                err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]) + abs(numeric))
                worst = max(worst, err)
    return worst
