"""Dense numpy tensors with reverse-mode automatic differentiation.

Every differentiable operation is a :class:`Function` subclass with a
``forward`` on raw arrays and a ``backward`` that maps the upstream gradient
to one gradient per input.  Calling ``Function.apply`` records the op in the
graph when gradients are enabled and any input requires them.  ``backward``
walks the recorded graph in reverse topological order and accumulates
gradients additively at fan-out.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Any, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

DIV_GUARD = 1e-12
MAX_RANK = 4

ArrayLike = Union[np.ndarray, float, int, Sequence[Any]]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericDomainError(ArithmeticError):
    """An operation left its numeric domain (division by ~0, log of <= 0, non-finite output)."""


class _State(threading.local):
    def __init__(self) -> None:
        self.grad_enabled = True
        self.dtype = np.dtype(np.float32)


_state = _State()


def get_default_dtype() -> np.dtype:
    return _state.dtype


@contextlib.contextmanager
def precision(dtype: Any) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors.

    >>> with precision(np.float64):
    ...     Tensor([1.0]).dtype
    dtype('float64')
    """
    prev = _state.dtype
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _state.grad_enabled


def _as_array(data: ArrayLike, dtype: Optional[np.dtype] = None) -> np.ndarray:
    if isinstance(data, np.ndarray) and data.dtype.kind == "f" and dtype is None:
        return data
    if isinstance(data, np.floating) and dtype is None:
        return np.asarray(data)
    return np.asarray(data, dtype=dtype or _state.dtype)


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "requires_grad", "grad", "_ctx", "name")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype: Any = None,
        name: Optional[str] = None,
    ) -> None:
        arr = _as_array(data, np.dtype(dtype) if dtype is not None else None)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
        if 0 in arr.shape:
            raise ShapeError(f"zero-sized extent in shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._ctx: Optional[Function] = None
        self.name = name

    # -- basic properties -------------------------------------------------
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_non_scalar(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return detach(self)

    def backward(self) -> None:
        backward(self)

    # -- operators ----------------------------------------------------------
    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Any) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Any) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __pow__(self, exponent: float) -> "Tensor":
        return Pow.apply(self, exponent=float(exponent))

    def __getitem__(self, key: Any) -> "Tensor":
        return Index.apply(self, key=key)

    def sum(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        return reduce("mean", self, axis, keepdims)

    def reshape(self, *shape: Any) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes: int) -> "Tensor":
        return Transpose.apply(self, axes=axes or None)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def relu(self) -> "Tensor":
        return relu(self)


def _raise_non_scalar(t: Tensor) -> float:
    raise ShapeError(f"expected a single-element tensor, got shape {t.shape}")


def as_tensor(x: Any, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or _state.dtype))


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded to reach ``shape``."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Function:
    """Base class for recorded operations."""

    differentiable = True

    def __init__(self, *inputs: Tensor) -> None:
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Any, **kwargs: Any) -> Tensor:
        ref = next((t for t in inputs if isinstance(t, Tensor)), None)
        tensors = tuple(as_tensor(t, ref) for t in inputs)
        fn = cls(*tensors)
        out_data = fn.forward(*(t.data for t in tensors), **kwargs)
        if not np.isfinite(out_data).all():
            raise NumericDomainError(f"{cls.__name__} produced non-finite values")
        out = Tensor(out_data)
        if _state.grad_enabled and cls.differentiable and any(t.requires_grad for t in tensors):
            out.requires_grad = True
            out._ctx = fn
        return out


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _broadcast_shape(a: np.ndarray, b: np.ndarray) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


class Add(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return unbroadcast(g, self.shapes[0]), unbroadcast(g, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        return unbroadcast(g, self.shapes[0]), unbroadcast(-g, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return unbroadcast(g * self.b, self.a.shape), unbroadcast(g * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        bad = np.abs(b) < DIV_GUARD
        if bad.any():
            positions = [tuple(int(i) for i in p) for p in np.argwhere(bad)[:8]]
            raise NumericDomainError(f"division by |b| < {DIV_GUARD:g} at positions {positions}")
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        ga = g / self.b
        gb = -g * self.a / (self.b * self.b)
        return unbroadcast(ga, self.a.shape), unbroadcast(gb, self.b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class Pow(Function):
    def forward(self, a, exponent):
        self.a, self.p = a, exponent
        return a**exponent

    def backward(self, g):
        return (g * self.p * self.a ** (self.p - 1),)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class Log(Function):
    def forward(self, a):
        if (a <= 0).any():
            raise NumericDomainError("log of a non-positive value")
        self.a = a
        return np.log(a)

    def backward(self, g):
        return (g / self.a,)


class ReLU(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0).astype(a.dtype, copy=False)

    def backward(self, g):
        return (g * self.mask,)


def add(a: Any, b: Any) -> Tensor:
    return Add.apply(a, b)


def sub(a: Any, b: Any) -> Tensor:
    return Sub.apply(a, b)


def mul(a: Any, b: Any) -> Tensor:
    return Mul.apply(a, b)


def div(a: Any, b: Any) -> Tensor:
    return Div.apply(a, b)


def elementwise(op: str, a: Any, b: Any) -> Tensor:
    """Dispatch one of ``add``, ``sub``, ``mul``, ``div`` by name."""
    ops = {"add": Add, "sub": Sub, "mul": Mul, "div": Div}
    if op not in ops:
        raise ValueError(f"unknown elementwise op {op!r}")
    return ops[op].apply(a, b)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


def log(x: Tensor) -> Tensor:
    return Log.apply(x)


def sqrt(x: Tensor) -> Tensor:
    return Pow.apply(x, exponent=0.5)


# ---------------------------------------------------------------------------
# shape manipulation and reductions
# ---------------------------------------------------------------------------


class Reshape(Function):
    def forward(self, a, shape):
        self.in_shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError as exc:
            raise ShapeError(str(exc)) from None

    def backward(self, g):
        return (g.reshape(self.in_shape),)


class Transpose(Function):
    def forward(self, a, axes):
        self.axes = axes
        return np.transpose(a, axes)

    def backward(self, g):
        if self.axes is None:
            return (np.transpose(g),)
        return (np.transpose(g, np.argsort(self.axes)),)


class Index(Function):
    def forward(self, a, key):
        self.key, self.in_shape, self.dtype = key, a.shape, a.dtype
        return np.array(a[key], copy=True)

    def backward(self, g):
        out = np.zeros(self.in_shape, dtype=self.dtype)
        np.add.at(out, self.key, g)
        return (out,)


def _norm_axes(axis: Any, ndim: int) -> Optional[Tuple[int, ...]]:
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(int(ax) % ndim)
    return tuple(sorted(out))


class Sum(Function):
    def forward(self, a, axis, keepdims):
        self.in_shape = a.shape
        self.axes = _norm_axes(axis, a.ndim)
        self.keepdims = keepdims
        return np.asarray(a.sum(axis=self.axes, keepdims=keepdims))

    def backward(self, g):
        if self.axes is not None and not self.keepdims:
            g = np.expand_dims(g, self.axes)
        return (np.broadcast_to(g, self.in_shape).copy(),)


class Mean(Sum):
    def forward(self, a, axis, keepdims):
        out = super().forward(a, axis, keepdims)
        self.count = a.size // max(out.size, 1) if self.axes is not None else a.size
        return out / self.count

    def backward(self, g):
        (full,) = super().backward(g)
        return (full / self.count,)


def reduce(op: str, x: Tensor, axis: Any = None, keepdims: bool = False) -> Tensor:
    if op == "sum":
        return Sum.apply(x, axis=axis, keepdims=keepdims)
    if op == "mean":
        return Mean.apply(x, axis=axis, keepdims=keepdims)
    raise ValueError(f"unknown reduction {op!r}")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


class Concat(Function):
    def forward(self, *arrays, axis):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, g):
        return tuple(np.split(g, self.splits, axis=self.axis))


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        return g @ self.b.T, self.a.T @ g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


class Conv2d(Function):
    """Cross-correlation of an NCHW input with an OIHW kernel (zero padding)."""

    def forward(self, x, w, stride, pad):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d expects NCHW input and OIHW weight, got {x.shape}, {w.shape}")
        n, c, h, wd = x.shape
        o, ci, kh, kw = w.shape
        if c != ci:
            raise ShapeError(f"input has {c} channels but kernel expects {ci}")
        ho = (h + 2 * pad - kh) // stride + 1
        wo = (wd + 2 * pad - kw) // stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError("convolution output would be empty")
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        sn, sc, sh, sw = xp.strides
        windows = np.lib.stride_tricks.as_strided(
            xp,
            shape=(n, ho, wo, c, kh, kw),
            strides=(sn, sh * stride, sw * stride, sc, sh, sw),
            writeable=False,
        )
        self.cols = windows.reshape(n * ho * wo, c * kh * kw)
        self.w = w
        self.geom = (x.shape, stride, pad, ho, wo)
        out = self.cols @ w.reshape(o, -1).T
        return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(self, g):
        (n, c, h, wd), stride, pad, ho, wo = self.geom
        o, _, kh, kw = self.w.shape
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (g2.T @ self.cols).reshape(self.w.shape)
        dcols = (g2 @ self.w.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
        return dx, dw


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    return Conv2d.apply(x, w, stride=int(stride), pad=int(pad))


# ---------------------------------------------------------------------------
# normalisations and softmax
# ---------------------------------------------------------------------------


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")


class SoftmaxT(Function):
    def forward(self, x, axis, temperature):
        _check_temperature(temperature)
        z = x / temperature
        z = z - z.max(axis=axis, keepdims=True)
        e = np.exp(z)
        self.y = e / e.sum(axis=axis, keepdims=True)
        self.axis, self.t = axis, temperature
        return self.y

    def backward(self, g):
        y = self.y
        return (y * (g - (g * y).sum(axis=self.axis, keepdims=True)) / self.t,)


class LogSoftmaxT(Function):
    def forward(self, x, axis, temperature):
        _check_temperature(temperature)
        z = x / temperature
        z = z - z.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
        out = z - lse
        self.p = np.exp(out)
        self.axis, self.t = axis, temperature
        return out

    def backward(self, g):
        return ((g - self.p * g.sum(axis=self.axis, keepdims=True)) / self.t,)


def softmax_t(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """Temperature softmax ``exp(x_i / t) / sum_k exp(x_k / t)`` along ``axis``."""
    return SoftmaxT.apply(x, axis=axis, temperature=float(temperature))


def log_softmax_t(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    return LogSoftmaxT.apply(x, axis=axis, temperature=float(temperature))


class L2Normalize(Function):
    def forward(self, x, axis, eps):
        n = np.sqrt((x * x).sum(axis=axis, keepdims=True))
        self.live = n > eps
        self.denom = np.maximum(n, eps)
        self.y = x / self.denom
        self.axis = axis
        return self.y

    def backward(self, g):
        proj = (g * self.y).sum(axis=self.axis, keepdims=True)
        dx = np.where(self.live, g - self.y * proj, g) / self.denom
        return (dx,)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = DIV_GUARD) -> Tensor:
    """``x / max(||x||, eps)`` along ``axis``."""
    return L2Normalize.apply(x, axis=axis, eps=float(eps))


class BatchNorm(Function):
    """Fused affine batch normalisation over every axis except the channel axis 1.

    With ``stats=None`` the batch moments are used (train mode) and are kept on
    ``self.batch_mean`` / ``self.batch_var`` for the caller's running averages.
    Otherwise ``stats=(mean, var)`` are treated as constants (eval mode).
    """

    def forward(self, x, gamma, beta, stats, eps):
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
        if gamma.shape[0] != x.shape[1]:
            raise ShapeError(f"normalisation expects {gamma.shape[0]} channels, input has {x.shape[1]}")
        if stats is None:
            if x.shape[0] < 2:
                raise ValueError("batch normalisation in train mode needs a batch of at least 2")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.batch_mean, self.batch_var = mean, var
            self.count = x.size // x.shape[1]
        else:
            mean, var = stats
        self.train = stats is None
        self.inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(bshape)
        self.xhat = (x - mean.reshape(bshape)) * self.inv
        self.gamma = gamma.reshape(bshape)
        self.axes = axes
        return self.xhat * self.gamma + beta.reshape(bshape)

    def backward(self, g):
        dgamma = (g * self.xhat).sum(axis=self.axes)
        dbeta = g.sum(axis=self.axes)
        dxhat = g * self.gamma
        if self.train:
            m = self.count
            s1 = dxhat.sum(axis=self.axes, keepdims=True)
            s2 = (dxhat * self.xhat).sum(axis=self.axes, keepdims=True)
            dx = self.inv * (dxhat - s1 / m - self.xhat * s2 / m)
        else:
            dx = dxhat * self.inv
        return dx, dgamma, dbeta


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    eps: float = 1e-5,
) -> Tuple[Tensor, Optional[Tuple[np.ndarray, np.ndarray]]]:
    """Normalise ``x`` and return ``(output, batch_moments)``.

    ``batch_moments`` is ``None`` in eval mode (when ``stats`` is given).
    """
    ref = x
    gamma, beta = as_tensor(gamma, ref), as_tensor(beta, ref)
    fn = BatchNorm(x, gamma, beta)
    out_data = fn.forward(x.data, gamma.data, beta.data, stats, eps)
    out = Tensor(out_data)
    if _state.grad_enabled and any(t.requires_grad for t in (x, gamma, beta)):
        out.requires_grad = True
        out._ctx = fn
    moments = (fn.batch_mean, fn.batch_var) if stats is None else None
    return out, moments


# ---------------------------------------------------------------------------
# gradient plumbing
# ---------------------------------------------------------------------------


def detach(x: Tensor) -> Tensor:
    """Same values, no gradient path back to ``x``."""
    out = Tensor(x.data)
    out.name = x.name
    return out


def _topological_order(root: Tensor) -> list:
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
        if node._ctx is not None:
            for parent in node._ctx.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._ctx is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._ctx.inputs, node._ctx.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            if pg.shape != parent.shape:
                raise ShapeError(
                    f"{type(node._ctx).__name__} returned gradient of shape {pg.shape} for input {parent.shape}"
                )
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
