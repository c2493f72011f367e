"""
Minimal reverse-mode automatic differentiation over dense numpy tensors.

A `Tape` records every op whose inputs include a recorded tensor; `Tape.backward`
walks the tape in reverse and returns the gradient of a scalar loss with
respect to every recorded leaf. Tensors that were never recorded are plain
constants and cost nothing beyond the numpy call.

Conventions:
- relu / abs / maximum / minimum / max / min have derivative 0 at kinks and ties.
- sqrt has derivative 0 at exactly 0.
- conv2d is a cross-correlation (no kernel flip) with configurable stride and padding.
- Every forward op checks its output for NaN/Inf and raises instead of propagating.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError, NonFiniteError, ShapeError
from .geometry import wrap_angle_array

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
Vjp = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

DEFAULT_DTYPE = np.float64


@dataclass
class _Node:
    """One tape entry: op kind, input node ids and the vector-Jacobian product"""
    op: str
    input_ids: Tuple[Optional[int], ...]
    vjp: Optional[Vjp]
    shape: Tuple[int, ...]


class GradientMap(dict):
    """Mapping node_id -> gradient Tensor, with lookups by tensor"""

    def wrt(self, tensor: "Tensor") -> "Tensor":
        """Gradient with respect to a recorded leaf (zeros if it did not affect the loss)"""
        if tensor.node_id is None:
            raise ValueError("tensor is not recorded on a tape")
        if tensor.node_id in self:
            return self[tensor.node_id]
        return Tensor(np.zeros(tensor.shape, dtype=tensor.dtype))


class Tape:
    """
    Append-only record of differentiable ops.

    A tape is single-writer; independent tapes may be used from separate threads.
    """

    def __init__(self, dtype=DEFAULT_DTYPE):
        """
        Initialize tape.

        Args:
            dtype: Floating point type for leaves created with `leaf`
        """
        self.dtype = np.dtype(dtype)
        self.nodes: List[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, data: ArrayLike) -> "Tensor":
        """Create a recorded leaf tensor"""
        arr = np.array(data.data if isinstance(data, Tensor) else data, dtype=self.dtype)
        _check_finite("leaf", arr)
        self.nodes.append(_Node("leaf", (), None, arr.shape))
        return Tensor(arr, self, len(self.nodes) - 1)

    def record(
        self,
        op: str,
        data: np.ndarray,
        inputs: Sequence["Tensor"],
        vjp: Vjp,
    ) -> "Tensor":
        """Append an op node and return its output tensor"""
        ids = tuple(t.node_id if t.tape is self else None for t in inputs)
        self.nodes.append(_Node(op, ids, vjp, data.shape))
        return Tensor(data, self, len(self.nodes) - 1)

    def backward(self, loss: "Tensor") -> GradientMap:
        """
        Reverse-mode gradient of a scalar loss.

        Args:
            loss: Scalar tensor recorded on this tape

        Returns:
            GradientMap from leaf node_id to gradient tensor

        Raises:
            ShapeError: If the loss is not a scalar
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self or loss.node_id is None:
            raise ValueError("loss is not recorded on this tape")

        grads: Dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape, dtype=loss.dtype)}
        result = GradientMap()
        for nid in range(loss.node_id, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.vjp is None:
                result[nid] = Tensor(g)
                continue
            for iid, ig in zip(node.input_ids, node.vjp(g)):
                if iid is None or ig is None:
                    continue
                if iid in grads:
                    grads[iid] = grads[iid] + ig
                else:
                    grads[iid] = ig
        return result


class Tensor:
    """Dense array optionally recorded on a tape"""

    __slots__ = ("data", "tape", "node_id")
    __array_priority__ = 100.0

    def __init__(self, data: ArrayLike, tape: Optional[Tape] = None, node_id: Optional[int] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.tape = tape
        self.node_id = node_id

    # Introspection
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
    def recorded(self) -> bool:
        return self.node_id is not None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _raise_not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.recorded else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # Operators
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p): return power(self, p)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, idx): return index(self, idx)

    # Method forms
    def sum(self, axis=None, keepdims: bool = False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims: bool = False): return mean(self, axis, keepdims)
    def max(self, axis=None, keepdims: bool = False): return max_(self, axis, keepdims)
    def min(self, axis=None, keepdims: bool = False): return min_(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes or None)
    def exp(self): return exp(self)
    def log(self): return log(self)
    def sin(self): return sin(self)
    def cos(self): return cos(self)
    def sqrt(self): return sqrt(self)
    def tanh(self): return tanh(self)
    def sigmoid(self): return sigmoid(self)
    def relu(self): return relu(self)
    def abs(self): return abs_(self)
    def square(self): return square(self)


def _raise_not_scalar(t: Tensor) -> float:
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


# Helpers
def constant(data: ArrayLike, dtype=None) -> Tensor:
    """Unrecorded tensor"""
    if isinstance(data, Tensor):
        return Tensor(data.data)
    return Tensor(np.asarray(data, dtype=dtype or DEFAULT_DTYPE))


def as_tensor(x: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(op: str, data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced a non-finite value")


def _common_tape(inputs: Sequence[Tensor]) -> Optional[Tape]:
    tape = None
    for t in inputs:
        if t.tape is not None and t.node_id is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ValueError("cannot combine tensors recorded on different tapes")
    return tape


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp: Vjp) -> Tensor:
    _check_finite(op, data)
    tape = _common_tape(inputs)
    if tape is None:
        return Tensor(data)
    return tape.record(op, data, inputs, vjp)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to an operand's shape"""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible")


def _binary(a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    if isinstance(b, Tensor):
        return as_tensor(a, like=b), b
    return as_tensor(a), as_tensor(b)


# Elementwise binary ops
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary(a, b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary(a, b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary(a, b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary(a, b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    out = a.data / b.data
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def maximum(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary(a, b)
    _broadcast_shape("maximum", a, b)
    return _make("maximum", np.maximum(a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * (a.data > b.data), a.shape),
                            _unbroadcast(g * (b.data > a.data), b.shape)))


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary(a, b)
    _broadcast_shape("minimum", a, b)
    return _make("minimum", np.minimum(a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * (a.data < b.data), a.shape),
                            _unbroadcast(g * (b.data < a.data), b.shape)))


def atan2(y: ArrayLike, x: ArrayLike) -> Tensor:
    """Differentiable atan2(y, x); undefined (error) at the origin"""
    y, x = _binary(y, x)
    _broadcast_shape("atan2", y, x)
    r2 = x.data ** 2 + y.data ** 2
    if np.any(r2 == 0):
        raise DomainError("atan2 is undefined at the origin")
    return _make("atan2", np.arctan2(y.data, x.data), (y, x),
                 lambda g: (_unbroadcast(g * x.data / r2, y.shape),
                            _unbroadcast(-g * y.data / r2, x.shape)))


# Elementwise unary ops
def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def power(a: ArrayLike, p: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(p, Tensor):
        raise TypeError("exponent must be a constant")
    p = float(p)
    if p < 1 and np.any(a.data == 0):
        raise DomainError(f"power {p} is not differentiable at 0")
    with np.errstate(invalid="ignore"):
        out = a.data ** p
    return _make("pow", out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sin(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make("sin", np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make("cos", np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return _make("sqrt", out, (a,), vjp)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        ex = np.exp(-np.abs(x))
        return np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(a.data).astype(a.dtype, copy=False)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.log1p(np.exp(-np.abs(a.data))) + np.maximum(a.data, 0.0)
    return _make("softplus", out, (a,), lambda g: (g * _sigmoid_np(a.data),))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make("relu", np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),))


def abs_(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clip(a: ArrayLike, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    return _make("clip", np.clip(a.data, lo, hi), (a,),
                 lambda g: (g * ((a.data > lo) & (a.data < hi)),))


def wrap_angle(a: ArrayLike) -> Tensor:
    """Wrap to (-pi, pi]; derivative 1 everywhere off the branch cut"""
    a = as_tensor(a)
    out = wrap_angle_array(a.data).astype(a.dtype, copy=False)
    return _make("wrap_angle", out, (a,), lambda g: (g,))


def where(cond: np.ndarray, a: ArrayLike, b: ArrayLike) -> Tensor:
    """Select from a where cond (a constant boolean mask) holds, else from b"""
    a, b = _binary(a, b)
    cond = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=bool)
    out = np.where(cond, a.data, b.data)
    return _make("where", out, (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                            _unbroadcast(np.where(cond, 0.0, g), b.shape)))


# Reductions
def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return _make("sum", out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims).copy(),))


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.size / max(out.size, 1)
    return _make("mean", out, (a,),
                 lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,))


def _extreme(op: str, a: ArrayLike, axis, keepdims: bool, fn) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(fn(a.data, axis=axis, keepdims=keepdims))

    def vjp(g):
        full = _expand_reduced(out, a.shape, axis, keepdims)
        hit = a.data == full
        count = hit.sum(axis=axis, keepdims=True)
        unique = hit & (count == 1)
        return (_expand_reduced(g, a.shape, axis, keepdims) * unique,)

    return _make(op, out, (a,), vjp)


def max_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme("max", a, axis, keepdims, np.max)


def min_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme("min", a, axis, keepdims, np.min)


# Shape ops
def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def index(a: ArrayLike, idx) -> Tensor:
    """Differentiable a[idx] (basic slicing or integer-array indexing)"""
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(int)
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make("slice", np.array(out), (a,), vjp)


def reshape(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inverse),))


def broadcast_to(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} to {tuple(shape)}")
    return _make("broadcast", out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}")
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make("concat", out, ts, lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {exc}")
    n = len(ts)
    return _make("stack", out, ts,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def pad(a: ArrayLike, pad_width: Sequence[Tuple[int, int]]) -> Tensor:
    """Zero padding; pad_width follows numpy.pad"""
    a = as_tensor(a)
    pad_width = [tuple(p) for p in pad_width]
    out = np.pad(a.data, pad_width)
    region = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.shape))
    return _make("pad", out, (a,), lambda g: (g[region],))


# Contractions
def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make("matmul", out, (a, b), vjp)


def conv2d(
    x: ArrayLike,
    weight: ArrayLike,
    bias: Optional[ArrayLike] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """
    2D cross-correlation.

    Args:
        x: Input (B, C, H, W)
        weight: Kernels (O, C, k, k)
        bias: Optional (O,)
        stride: Step between output samples
        padding: Zero padding on every spatial side

    Returns:
        Output (B, O, Ho, Wo)
    """
    x = as_tensor(x)
    w = as_tensor(weight, like=x)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be >= 1 and padding >= 0")
    k_h, k_w = w.shape[2], w.shape[3]
    p, s = padding, stride
    B, C, H, W = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    if xp.shape[2] < k_h or xp.shape[3] < k_w:
        raise ShapeError(f"conv2d: kernel {k_h}x{k_w} larger than padded input {xp.shape[2:]}")
    win = sliding_window_view(xp, (k_h, k_w), axis=(2, 3))[:, :, ::s, ::s]
    Ho, Wo = win.shape[2], win.shape[3]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    inputs: List[Tensor] = [x, w]
    b = None
    if bias is not None:
        b = as_tensor(bias, like=x)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {w.shape[0]} filters")
        out = out + b.data[None, :, None, None]
        inputs.append(b)
    out = np.ascontiguousarray(out)

    def vjp(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(g, w.data, axes=([1], [0]))  # (B, Ho, Wo, C, kh, kw)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k_h):
            for j in range(k_w):
                gxp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += cols[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p + H, p:p + W]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make("conv2d", out, inputs, vjp)


# Verification
def grad_check(
    f: Callable[[Tensor], Tensor],
    x: ArrayLike,
    eps: float = 1e-6,
) -> float:
    """
    Compare reverse-mode gradients against central finite differences.

    Args:
        f: Function of one tensor returning a scalar tensor
        x: Point at which to check
        eps: Finite-difference step

    Returns:
        max_i |analytic_i - numeric_i| / max(1, |analytic_i|)

    Raises:
        NonFiniteError: If f is not finite at a perturbed point
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    tape = Tape()
    leaf = tape.leaf(x0)
    out = f(leaf)
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    if not out.recorded:
        analytic = np.zeros_like(x0)
    else:
        analytic = tape.backward(out).wrt(leaf).data

    def evaluate(point: np.ndarray) -> float:
        value = f(Tensor(point)).item()
        if not np.isfinite(value):
            raise NonFiniteError("function is not finite at a perturbed point")
        return value

    numeric = np.zeros_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp.flat[i] += eps
        xm.flat[i] -= eps
        numeric.flat[i] = (evaluate(xp) - evaluate(xm)) / (2.0 * eps)

    if x0.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))
