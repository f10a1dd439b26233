"""
N-dimensional arrays with reverse-mode differentiation on an explicit tape.

Operations executed while a ``Tape`` is active (``with Tape() as tape:``) and
touching at least one tensor that requires a gradient are recorded in execution
order; ``tape.backward(loss)`` walks the records in reverse and accumulates
gradients into the leaf tensors. Tensor values are read-only arrays.
"""
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from rpeflow.errors import ConfigError, ContractError, DomainError, ShapeError

LEAKY_SLOPE = 0.1
LAYERNORM_EPS = 1e-5

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
VJP = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_local = threading.local()
_default_dtype = np.dtype(np.float64)


def get_default_dtype() -> np.dtype:
    """Return the floating dtype new tensors are created with."""
    return _default_dtype


def set_default_dtype(dtype) -> None:
    """
    Set the floating dtype new tensors are created with.

    Args:
        dtype: ``np.float32`` or ``np.float64``
    """
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError(f"unsupported tensor dtype {dtype}; use float32 or float64")
    _default_dtype = dtype


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the default tensor dtype."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def _tape_stack() -> List[Optional["Tape"]]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def current_tape() -> Optional["Tape"]:
    """Return the tape recording on this thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspend recording on this thread."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    """
    Read-only N-dimensional array that may participate in a tape.

    Args:
        values: Anything ``np.array`` accepts
        requires_grad: Whether gradients should be accumulated into ``grad``
        dtype: Storage dtype, defaults to ``get_default_dtype()``
        name: Optional label used in diagnostics
    """

    __slots__ = ("values", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, values: ArrayLike, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(values, Tensor):
            values = values.values
        arr = np.array(values, dtype=dtype or _default_dtype)
        arr.setflags(write=False)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def _wrap(cls, values: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        arr = np.asarray(values)
        if arr.flags.writeable:
            arr.setflags(write=False)
        out.values = arr
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        return out

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    def __len__(self) -> int:
        return self.values.shape[0]

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def item(self) -> float:
        return float(self.values)

    def numpy(self) -> np.ndarray:
        """Writable copy of the values."""
        return np.array(self.values)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.values, requires_grad=False)

    def assign(self, values: ArrayLike) -> None:
        """
        Replace the stored values (optimizer updates, finite differences).

        Raises:
            ContractError: if a tape is recording on this thread
            ShapeError: if the new values change the shape
        """
        if current_tape() is not None:
            raise ContractError("cannot assign tensor values while a tape is recording")
        arr = np.array(values, dtype=self.values.dtype)
        if arr.shape != self.values.shape:
            raise ShapeError(f"assign shape {arr.shape} does not match {self.values.shape}")
        arr.setflags(write=False)
        self.values = arr

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators -----------------------------------------------------

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
        return getitem(self, index)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def leaky_relu(self):
        return leaky_relu(self)

    def square(self):
        return square(self)

    def sqrt(self):
        return sqrt(self)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return max_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def norm(self, axis=-1, keepdims: bool = False):
        return norm(self, axis=axis, keepdims=keepdims)

    def clip(self, low: float, high: float):
        return clip(self, low, high)


@dataclass
class TapeRecord:
    """One executed operation: inputs, output and its vector-Jacobian product."""

    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    vjp: VJP


class Tape:
    """
    Ordered record of executed operations on one thread.

    Records are appended in execution order, which is a topological order of
    the computation graph; the backward pass visits each record once.
    """

    def __init__(self):
        self.records: List[TapeRecord] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape exited out of order")
        stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, vjp: VJP) -> None:
        self.records.append(TapeRecord(op, inputs, output, vjp))

    def _propagate(self, root: Tensor, seed: Optional[np.ndarray]) -> Dict[int, np.ndarray]:
        if seed is None:
            if root.size != 1:
                raise ShapeError(f"backward from non-scalar tensor of shape {root.shape} needs a seed")
            seed = np.ones_like(root.values)
        grads: Dict[int, np.ndarray] = {id(root): np.asarray(seed, dtype=root.dtype)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            parts = rec.vjp(g)
            for inp, part in zip(rec.inputs, parts):
                if part is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + part
                else:
                    grads[key] = part
        return grads

    def backward(self, root: Tensor, seed: Optional[np.ndarray] = None) -> None:
        """
        Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf on the tape.

        Args:
            root: Scalar output (or any output when ``seed`` is given)
            seed: Upstream gradient, ones for scalar roots
        """
        grads = self._propagate(root, seed)
        seen = set()
        for leaf in self._leaves(root):
            key = id(leaf)
            if key in grads and key not in seen:
                seen.add(key)
                leaf.grad = grads[key].copy() if leaf.grad is None else leaf.grad + grads[key]

    def gradients(self, root: Tensor, wrt: Sequence[Tensor], seed: Optional[np.ndarray] = None) -> List[np.ndarray]:
        """
        Return d(root)/d(t) for each leaf ``t`` in ``wrt`` without touching ``.grad``.

        Unreached leaves get zeros.
        """
        grads = self._propagate(root, seed)
        return [
            np.array(grads[id(t)], dtype=t.dtype) if id(t) in grads else np.zeros(t.shape, dtype=t.dtype)
            for t in wrt
        ]

    def _leaves(self, root: Tensor) -> Iterable[Tensor]:
        yield root
        for rec in self.records:
            yield from rec.inputs


# -- helpers ---------------------------------------------------------------


def as_tensor(x: ArrayLike) -> Tensor:
    """Wrap constants into non-differentiable tensors of the default dtype."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def tensor(values: ArrayLike, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(values, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_default_dtype), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_default_dtype), requires_grad=requires_grad)


def _result(op: str, values: np.ndarray, inputs: Tuple[Tensor, ...], vjp: VJP) -> Tensor:
    tape = current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(values, requires_grad=needs)
    if needs:
        tape.record(op, inputs, out, vjp)
    return out


def _broadcast_shape(a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcastable")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} is invalid for a tensor of rank {ndim}")
    return axis % ndim


def _axes(axis, ndim: int) -> Optional[Tuple[int, ...]]:
    if axis is None:
        return None
    if isinstance(axis, int):
        return (_axis(axis, ndim),)
    return tuple(sorted(_axis(a, ndim) for a in axis))


# -- elementwise -----------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _result(
        "add", a.values + b.values, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _result(
        "sub", a.values - b.values, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _result(
        "mul", a.values * b.values, (a, b),
        lambda g: (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)),
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    if np.any(b.values == 0):
        raise DomainError("division by exact zero")
    out = a.values / b.values
    return _result(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / b.values, a.shape), _unbroadcast(-g * out / b.values, b.shape)),
    )


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result("neg", -a.values, (a,), lambda g: (-g,))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.values)
    return _result("exp", out, (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.values <= 0):
        raise DomainError("log of a non-positive value")
    return _result("log", np.log(a.values), (a,), lambda g: (g / a.values,))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = a.values > 0
    return _result("relu", np.where(mask, a.values, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,))


def leaky_relu(a: ArrayLike, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.values > 0, 1.0, slope).astype(a.dtype)
    return _result("leaky_relu", a.values * scale, (a,), lambda g: (g * scale,))


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result("square", a.values * a.values, (a,), lambda g: (2.0 * a.values * g,))


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.values < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.values)

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return _result("sqrt", out, (a,), vjp)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "neg": neg,
    "relu": relu,
    "leaky-relu": leaky_relu,
    "square": square,
    "sqrt": sqrt,
}
_BINARY = {"add", "sub", "mul", "div"}


def elementwise(kind: str, a: ArrayLike, b: Optional[ArrayLike] = None) -> Tensor:
    """
    Apply an elementwise operation by name.

    Args:
        kind: One of add, sub, mul, div, exp, log, neg, relu, leaky-relu, square, sqrt
        a: First operand
        b: Second operand for binary kinds

    Returns:
        Result tensor with the broadcast shape
    """
    fn = _ELEMENTWISE.get(kind)
    if fn is None:
        raise ContractError(f"unknown elementwise operation {kind!r}")
    if kind in _BINARY:
        if b is None:
            raise ContractError(f"{kind} needs two operands")
        return fn(a, b)
    return fn(a)


def clip(a: ArrayLike, low: float, high: float) -> Tensor:
    """Clamp values to [low, high]; gradient passes only inside the range."""
    a = as_tensor(a)
    inside = (a.values >= low) & (a.values <= high)
    return _result("clip", np.clip(a.values, low, high), (a,), lambda g: (g * inside,))


# -- reductions and shape --------------------------------------------------


def sum_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axes(axis, a.ndim)
    out = a.values.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result("sum", out, (a,), vjp)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axes(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / max(count, 1))


def max_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    if axis is None:
        flat = reshape(a, (a.size,))
        return max_(flat, axis=0, keepdims=False)
    ax = _axis(axis, a.ndim)
    idx = np.argmax(a.values, axis=ax)
    out = np.take_along_axis(a.values, np.expand_dims(idx, ax), axis=ax)
    if not keepdims:
        out = np.squeeze(out, axis=ax)

    def vjp(g):
        grad = np.zeros(a.shape, dtype=a.dtype)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(grad, np.expand_dims(idx, ax), gk, axis=ax)
        return (grad,)

    return _result("max", out, (a,), vjp)


def minimum(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise minimum of same-shape tensors."""
    stacked = stack([neg(t) for t in tensors], axis=0)
    return neg(max_(stacked, axis=0))


def reshape(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}")
    return _result("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result("transpose", np.transpose(a.values, axes), (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat of an empty sequence")
    ax = _axis(axis, ts[0].ndim)
    try:
        out = np.concatenate([t.values for t in ts], axis=ax)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in ts]}: {exc}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _result("concat", out, ts, lambda g: tuple(np.split(g, bounds, axis=ax)))


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("stack of an empty sequence")
    ndim = ts[0].ndim + 1
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for stacking rank-{ndim - 1} tensors")
    ax = axis % ndim
    expanded = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in ts]
    return concat(expanded, axis=ax)


def getitem(a: ArrayLike, index) -> Tensor:
    a = as_tensor(a)
    out = a.values[index]

    def vjp(g):
        grad = np.zeros(a.shape, dtype=a.dtype)
        np.add.at(grad, index, g)
        return (grad,)

    return _result("getitem", np.array(out), (a,), vjp)


def take(a: ArrayLike, indices: np.ndarray) -> Tensor:
    """Gather rows of ``a`` along axis 0; output shape is indices.shape + a.shape[1:]."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= a.shape[0]):
        raise ShapeError(f"take index out of range for {a.shape[0]} rows")

    def vjp(g):
        grad = np.zeros(a.shape, dtype=a.dtype)
        np.add.at(grad, indices, g)
        return (grad,)

    return _result("take", a.values[indices], (a,), vjp)


def segment_sum(values: ArrayLike, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Scatter-add rows of ``values`` into ``num_segments`` rows (adjoint of ``take``)."""
    values = as_tensor(values)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if segment_ids.shape != values.shape[:1]:
        raise ShapeError(f"segment ids {segment_ids.shape} do not match rows {values.shape[:1]}")
    out = np.zeros((num_segments,) + values.shape[1:], dtype=values.dtype)
    np.add.at(out, segment_ids, values.values)
    return _result("segment_sum", out, (values,), lambda g: (g[segment_ids],))


def norm(a: ArrayLike, axis=-1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at zero is zero."""
    a = as_tensor(a)
    ax = _axis(axis, a.ndim)
    out = np.sqrt((a.values * a.values).sum(axis=ax, keepdims=True))

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, ax)
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, a.values / safe, 0.0) * gk,)

    return _result("norm", out if keepdims else np.squeeze(out, axis=ax), (a,), vjp)


# -- linear algebra and network primitives ---------------------------------


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    Matrix product of rank-2 (or batched) tensors.

    Returns:
        ``a @ b`` with gradients ``g @ b.T`` and ``a.T @ g``
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.values, b.values)
    except ValueError as exc:
        raise ShapeError(str(exc))

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
        gb = np.matmul(np.swapaxes(a.values, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _result("matmul", out, (a, b), vjp)


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis``."""
    a = as_tensor(a)
    ax = _axis(axis, a.ndim)
    shifted = a.values - a.values.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)
    return _result(
        "softmax", out, (a,),
        lambda g: (out * (g - (g * out).sum(axis=ax, keepdims=True)),),
    )


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(0, 1))
    return win[::stride, ::stride]


def conv2d(
    x: ArrayLike,
    w: ArrayLike,
    stride: int = 1,
    padding: int = 0,
    depthwise: bool = False,
) -> Tensor:
    """
    2D convolution of an H×W×Cin map.

    Args:
        x: Input of shape (H, W, Cin)
        w: Weights (k, k, Cin, Cout), or (k, k, C) when ``depthwise``
        stride: Spatial stride
        padding: Zero padding on each border
        depthwise: One k×k filter per channel, Cout = Cin

    Returns:
        Output of shape (Ho, Wo, Cout), Ho = (H + 2·padding − k) // stride + 1
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3:
        raise ShapeError(f"conv2d input must be H×W×C, got {x.shape}")
    k = w.shape[0]
    if w.shape[1] != k or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square with odd size, got {w.shape}")
    cin = x.shape[2]
    if depthwise:
        if w.shape != (k, k, cin):
            raise ShapeError(f"depthwise kernel must be ({k}, {k}, {cin}), got {w.shape}")
    elif w.ndim != 4 or w.shape[2] != cin:
        raise ShapeError(f"kernel {w.shape} does not match {cin} input channels")
    h, wd = x.shape[0] + 2 * padding, x.shape[1] + 2 * padding
    if k > h or k > wd:
        raise ShapeError(f"kernel {k}×{k} larger than padded input {h}×{wd}")

    xp = np.pad(x.values, ((padding, padding), (padding, padding), (0, 0)))
    win = _windows(xp, k, stride)  # (Ho, Wo, Cin, k, k)
    ho, wo = win.shape[0], win.shape[1]

    if depthwise:
        out = np.einsum("hwcij,ijc->hwc", win, w.values)
    else:
        cols = win.reshape(ho * wo, cin * k * k)
        wmat = w.values.transpose(2, 0, 1, 3).reshape(cin * k * k, -1)
        out = (cols @ wmat).reshape(ho, wo, -1)

    def vjp(g):
        if depthwise:
            gw = np.einsum("hwcij,hwc->ijc", win, g)
            gwin = np.einsum("hwc,ijc->hwcij", g, w.values)
        else:
            g2 = g.reshape(ho * wo, -1)
            gw = (cols.T @ g2).reshape(cin, k, k, -1).transpose(1, 2, 0, 3)
            gwin = (g2 @ wmat.T).reshape(ho, wo, cin, k, k)
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                gxp[i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gwin[:, :, :, i, j]
        gx = gxp[padding:padding + x.shape[0], padding:padding + x.shape[1], :]
        return (gx, gw)

    return _result("conv2d", out, (x, w), vjp)


def correlation2d(a: ArrayLike, b: ArrayLike, radius: int) -> Tensor:
    """
    Local correlation volume between two H×W×C maps.

    Channel (dy + r)·(2r + 1) + (dx + r) holds Σ_c a[y, x, c]·b[y + dy, x + dx, c] / C;
    ``b`` is zero outside the image.

    Returns:
        (H, W, (2r + 1)²) volume
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim != 3:
        raise ShapeError(f"correlation needs two equal H×W×C maps, got {a.shape} and {b.shape}")
    if radius < 0:
        raise ConfigError(f"correlation radius must be >= 0, got {radius}")
    h, w, c = a.shape
    r = radius
    bp = np.pad(b.values, ((r, r), (r, r), (0, 0)))
    offsets = [(dy, dx) for dy in range(2 * r + 1) for dx in range(2 * r + 1)]
    out = np.empty((h, w, len(offsets)), dtype=a.dtype)
    for d, (dy, dx) in enumerate(offsets):
        out[:, :, d] = (a.values * bp[dy:dy + h, dx:dx + w, :]).sum(axis=2) / c

    def vjp(g):
        ga = np.zeros(a.shape, dtype=a.dtype)
        gbp = np.zeros(bp.shape, dtype=a.dtype)
        for d, (dy, dx) in enumerate(offsets):
            gd = g[:, :, d:d + 1] / c
            ga += gd * bp[dy:dy + h, dx:dx + w, :]
            gbp[dy:dy + h, dx:dx + w, :] += gd * a.values
        return (ga, gbp[r:r + h, r:r + w, :])

    return _result("correlation2d", out, (a, b), vjp)


def layernorm(
    x: ArrayLike,
    axis: int = -1,
    gamma: Optional[ArrayLike] = None,
    beta: Optional[ArrayLike] = None,
    eps: float = LAYERNORM_EPS,
) -> Tensor:
    """
    Standardize along ``axis`` then apply the optional affine scale/shift.

    Args:
        x: Input tensor
        axis: Normalized axis, extent at least 2
        gamma: Scale with the extent of ``axis``
        beta: Shift with the extent of ``axis``
        eps: Variance guard
    """
    x = as_tensor(x)
    ax = _axis(axis, x.ndim)
    if x.shape[ax] < 2:
        raise ShapeError(f"layernorm axis extent must be >= 2, got {x.shape[ax]}")
    centered = x - mean(x, axis=ax, keepdims=True)
    var = mean(square(centered), axis=ax, keepdims=True)
    out = centered / sqrt(var + eps)
    affine_shape = [1] * x.ndim
    affine_shape[ax] = x.shape[ax]
    if gamma is not None:
        out = out * reshape(as_tensor(gamma), affine_shape)
    if beta is not None:
        out = out + reshape(as_tensor(beta), affine_shape)
    return out
