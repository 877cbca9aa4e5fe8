"""Minimal dense-tensor engine with a define-by-run tape and a reverse sweep.

Every primitive records itself on the active :class:`Tape` when at least one
of its inputs is tracked by that tape. Recording order is creation order, and
an output is always created after its inputs, so walking the tape backwards
is a valid reverse topological order.

Broadcasting is limited to scalar<->tensor and equal shapes. The few places
that need more (biases, per-channel gates) have their own primitives.
"""
import logging
import threading
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, DomainError

logger = logging.getLogger("ComboLabAutodiff")

Rule = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
Operand = Union["Tensor", np.ndarray, float, int, Sequence[float]]


class Tensor:
    """Dense float64 value with an optional gradient slot.

    ``node_id`` is only set for tensors recorded on a tape; anything else is
    treated as a constant by the backward sweep.
    """

    # make ndarray (op) Tensor dispatch to the Tensor operators
    __array_priority__ = 1000

    def __init__(self, data: Operand, copy: bool = True):
        if copy:
            self.data = np.array(data, dtype=np.float64)
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self._tape: Optional["Tape"] = None

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
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() needs a single-element tensor, got shape {0}".format(self.shape))
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tracked = "" if self.node_id is None else ", node_id={0}".format(self.node_id)
        return "Tensor(shape={0}{1})".format(self.shape, tracked)

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: float) -> "Tensor":
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by a Python number")
        return mul(self, 1.0 / float(other))

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: Operand) -> "Tensor":
        return matmul(self, other)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return tensor_sum(self, axis)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return reduce_mean(self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def abs(self) -> "Tensor":
        return absolute(self)

    def log(self) -> "Tensor":
        return log(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)


@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    rule: Optional[Rule]


_local = threading.local()


def _tape_stack() -> List["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    """The innermost tape entered on the current thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Tapes are thread-confined: entering one only affects the current thread,
    so independent tapes can run concurrently.
    """

    def __init__(self):
        self.entries: List[TapeEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def tracks(self, tensor: Tensor) -> bool:
        return tensor._tape is self

    def watch(self, tensor: Tensor) -> Tensor:
        """Mark a tensor as a leaf whose gradient should be collected."""
        if tensor._tape is self:
            return tensor
        if tensor._tape is not None:
            raise ContractError("tensor is already recorded on another tape")
        self._append(TapeEntry("leaf", (), tensor, None))
        return tensor

    def _append(self, entry: TapeEntry) -> None:
        entry.output.node_id = len(self.entries)
        entry.output._tape = self
        self.entries.append(entry)


def as_tensor(value: Operand) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _emit(op: str, inputs: Tuple[Tensor, ...], data: np.ndarray, rule: Rule) -> Tensor:
    if not np.all(np.isfinite(data)) and all(np.all(np.isfinite(t.data)) for t in inputs):
        raise DomainError("{0} produced non-finite values from finite inputs".format(op))
    out = Tensor(data, copy=False)
    tape = active_tape()
    if tape is not None and any(t._tape is tape for t in inputs):
        tape._append(TapeEntry(op, inputs, out, rule))
    return out


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise DimensionError(op, a.shape, b.shape)


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if shape == () and grad.shape != ():
        return np.asarray(grad.sum())
    return grad


# -- elementwise ------------------------------------------------------------

def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def rule(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _emit("add", (a, b), a.data + b.data, rule)


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def rule(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _emit("sub", (a, b), a.data - b.data, rule)


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def rule(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _emit("mul", (a, b), a.data * b.data, rule)


def neg(a: Operand) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def absolute(a: Operand) -> Tensor:
    """|a|; the backward rule uses sign(a), which is 0 at a == 0."""
    a = as_tensor(a)
    return _emit("abs", (a,), np.abs(a.data), lambda g: (g * np.sign(a.data),))


def log(a: Operand) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive value (min={0!r}); clamp first".format(float(a.data.min())))
    return _emit("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def relu(a: Operand) -> Tensor:
    a = as_tensor(a)
    return _emit("relu", (a,), np.maximum(a.data, 0.0), lambda g: (g * (a.data > 0.0),))


def sigmoid(a: Operand) -> Tensor:
    a = as_tensor(a)
    e = np.exp(-np.abs(a.data))
    s = np.where(a.data >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def clamp(a: Operand, lo: float, hi: float = np.inf) -> Tensor:
    """Clip into [lo, hi]; gradient passes only where no clipping happened."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit("clamp", (a,), np.clip(a.data, lo, hi), lambda g: (g * inside,))


def where(mask: np.ndarray, a: Operand, b: Operand) -> Tensor:
    """Select a where mask holds, b elsewhere. The mask is a constant."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    for operand in (a, b):
        if operand.ndim != 0 and operand.shape != mask.shape:
            raise DimensionError("where", mask.shape, operand.shape)

    def rule(g):
        return _reduce_to(g * mask, a.shape), _reduce_to(g * ~mask, b.shape)

    data = np.where(mask, a.data, b.data)
    return _emit("where", (a, b), data, rule)


ELEMENTWISE: Dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "abs": absolute,
    "log": log,
    "relu": relu,
    "sigmoid": sigmoid,
}


def elementwise(op: str, *args: Operand) -> Tensor:
    """Apply one of the named elementwise primitives."""
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ContractError("unknown elementwise op {0!r}; expected one of {1}".format(op, sorted(ELEMENTWISE)))
    return fn(*args)


# -- shape and reductions ---------------------------------------------------

def matmul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return _emit("matmul", (a, b), a.data @ b.data, rule)


def transpose(a: Operand) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError("transpose", a.shape)
    return _emit("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def reshape(a: Operand, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise DimensionError("reshape", a.shape, shape)
    return _emit("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def _check_axis(op: str, a: Tensor, axis: Optional[int]) -> Optional[int]:
    if axis is None:
        return None
    if not -a.ndim <= axis < a.ndim:
        raise ContractError("{0}: axis {1} out of range for shape {2}".format(op, axis, a.shape))
    return axis % a.ndim


def _spread(g: np.ndarray, shape: Tuple[int, ...], axis: Optional[int]) -> np.ndarray:
    if axis is not None:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def tensor_sum(a: Operand, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis("sum", a, axis)
    return _emit("sum", (a,), np.asarray(a.data.sum(axis=axis)), lambda g: (_spread(g, a.shape, axis),))


def reduce_mean(a: Operand, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis("reduce_mean", a, axis)
    n = a.size if axis is None else a.shape[axis]
    if a.size == 0 or n == 0:
        raise DomainError("mean of an empty tensor (shape {0})".format(a.shape))
    return _emit("mean", (a,), np.asarray(a.data.mean(axis=axis)), lambda g: (_spread(g / n, a.shape, axis),))


def softmax(logits: Operand) -> Tensor:
    """Row-wise softmax over the last axis, max-subtracted for stability."""
    x = as_tensor(logits)
    if x.ndim == 0 or x.shape[-1] < 2:
        raise ContractError("softmax needs at least 2 classes, got shape {0}".format(x.shape))
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), s, rule)


# -- channel maps -----------------------------------------------------------

def global_avg_pool(u: Operand) -> Tensor:
    """Mean over the two trailing (spatial) axes: C×H×W -> C, N×C×H×W -> N×C."""
    u = as_tensor(u)
    if u.ndim < 3:
        raise DimensionError("global_avg_pool", u.shape)
    area = u.shape[-1] * u.shape[-2]

    def rule(g):
        return (np.broadcast_to(g[..., None, None] / area, u.shape).copy(),)

    return _emit("global_avg_pool", (u,), u.data.mean(axis=(-2, -1)), rule)


def channel_scale(u: Operand, s: Operand) -> Tensor:
    """Scale every spatial map u_c by the scalar s_c."""
    u, s = as_tensor(u), as_tensor(s)
    if u.ndim != s.ndim + 2 or u.shape[:s.ndim] != s.shape:
        raise DimensionError("channel_scale", u.shape, s.shape)
    gate = s.data[..., None, None]

    def rule(g):
        return g * gate, (g * u.data).sum(axis=(-2, -1))

    return _emit("channel_scale", (u, s), u.data * gate, rule)


def add_bias(x: Operand, b: Operand) -> Tensor:
    """Add a 1-D bias along axis 1 (features of N×D, channels of N×C×H×W)."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise DimensionError("add_bias", x.shape, b.shape)
    view = b.data.reshape((1, -1) + (1,) * (x.ndim - 2))
    other_axes = tuple(i for i in range(x.ndim) if i != 1)

    def rule(g):
        return g, g.sum(axis=other_axes)

    return _emit("add_bias", (x, b), x.data + view, rule)


def conv2d(x: Operand, w: Operand) -> Tensor:
    """Stride-1 convolution with an odd square kernel and same padding.

    x is N×Cin×H×W, w is Cout×Cin×k×k.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise DimensionError("conv2d", x.shape, w.shape)
    k = w.shape[2]
    pad = k // 2
    height, width = x.shape[2], x.shape[3]
    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))
    out = np.einsum("nchwij,ocij->nohw", windows, w.data, optimize=True)

    def rule(g):
        grad_w = np.einsum("nchwij,nohw->ocij", windows, g, optimize=True)
        grad_padded = np.zeros_like(padded)
        for i in range(k):
            for j in range(k):
                grad_padded[:, :, i:i + height, j:j + width] += np.einsum(
                    "nohw,oc->nchw", g, w.data[:, :, i, j], optimize=True
                )
        return grad_padded[:, :, pad:pad + height, pad:pad + width], grad_w

    return _emit("conv2d", (x, w), out, rule)


# -- reverse sweep ----------------------------------------------------------

def backward(loss: Tensor, tape: Optional[Tape] = None) -> Dict[int, np.ndarray]:
    """Populate ``grad`` on every tape node the loss depends on.

    Gradients accumulate: calling this twice without :func:`zero_grad` adds
    the second sweep onto the first.

    Returns:
        Mapping of node id to its gradient buffer.
    """
    if loss.size != 1:
        raise ContractError("backward needs a scalar loss, got shape {0}".format(loss.shape))
    if tape is None:
        tape = loss._tape
    if tape is None or loss._tape is not tape:
        raise ContractError("loss is not recorded on the given tape")

    cotangents: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for entry in reversed(tape.entries[:loss.node_id + 1]):
        node = entry.output
        g = cotangents.pop(node.node_id, None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if entry.rule is None:
            continue
        for inp, ig in zip(entry.inputs, entry.rule(g)):
            if ig is None or inp._tape is not tape:
                continue
            ig = np.asarray(ig, dtype=np.float64)
            if ig.shape != inp.shape:
                raise ContractError("{0} backward produced shape {1} for input {2}".format(entry.op, ig.shape, inp.shape))
            prev = cotangents.get(inp.node_id)
            cotangents[inp.node_id] = ig if prev is None else prev + ig

    logger.debug("backward swept {0} tape entries".format(loss.node_id + 1))
    return {e.output.node_id: e.output.grad for e in tape.entries if e.output.grad is not None}


def zero_grad(*tensors: Tensor) -> None:
    for t in tensors:
        t.grad = None


# -- finite differences -----------------------------------------------------

def numeric_gradient(f: Callable[[Tensor], Tensor], point: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar-valued graph builder."""
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + h
        f_plus = f(Tensor(x)).item()
        x.flat[i] = orig - h
        f_minus = f(Tensor(x)).item()
        x.flat[i] = orig
        grad.flat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def grad_check(f: Callable[[Tensor], Tensor], point: Operand, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    ``f`` builds a scalar graph from its single tensor argument. Points should
    stay clear of kinks (abs/relu at 0) by more than ``h``.
    """
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    with Tape() as tape:
        x = tape.watch(Tensor(x0))
        out = f(x)
        if out._tape is tape:
            backward(out, tape)
        elif out.size != 1:
            raise ContractError("grad_check needs a scalar-valued function, got shape {0}".format(out.shape))
    analytic = x.grad if x.grad is not None else np.zeros_like(x0)
    numeric = numeric_gradient(f, x0, h)
    if numeric.size == 0:
        return 0.0
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max())
