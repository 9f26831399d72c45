"""Dense 64-bit tensors with reverse-mode automatic differentiation.

Operations are dispatched through ``apply`` against a fixed registry of op
kinds. When any input requires a gradient and a ``Tape`` is active on the
current thread, the op is recorded; ``backward`` walks the tape in reverse and
returns the gradient of every requires-grad leaf registered on it.

No broadcasting: apart from ``scalar_mul`` every shape alignment is explicit,
row selection and pooling are written as ``matmul`` with constant matrices.
"""

import threading
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ComputeError

logger = logging.getLogger(__name__)


class ShapeMismatchError(ComputeError):
    """Input shapes do not conform to the op's rule."""
    pass


class UnknownOpError(ComputeError):
    """Op kind is not part of the registry."""
    pass


class DomainError(ComputeError):
    """Input lies outside the op's domain (log of non-positive, power of negative)."""
    pass


class TapeError(ComputeError):
    """Backward called on a detached tape or a non-scalar loss."""
    pass


class OpKind(str, Enum):
    """Differentiable operations known to the engine."""
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    SCALAR_MUL = "scalar_mul"
    MATMUL = "matmul"
    TRANSPOSE = "transpose"
    CONCAT = "concat"
    RESHAPE = "reshape"
    MEAN = "mean"
    SUM = "sum"
    SOFTMAX = "softmax"
    SIGMOID = "sigmoid"
    RELU = "relu"
    LOG = "log"
    POWER = "power"
    CLAMP = "clamp"


_thread_state = threading.local()


def current_tape() -> Optional["Tape"]:
    """Tape installed on this thread, if any."""
    return getattr(_thread_state, "tape", None)


class Tensor:
    """Dense real array, row-major, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "node_id", "name", "_tape_key")

    def __init__(self, data: Any, requires_grad: bool = False, name: str = ""):
        array = np.array(data, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1)
        if array.size == 0:
            raise ShapeMismatchError("tensors must have positive dimension sizes")
        array.flags.writeable = False
        self.data = array
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self.name = name
        self._tape_key: Optional[Tuple["Tape", int]] = None

    @classmethod
    def constant(cls, data: Any, name: str = "") -> "Tensor":
        return cls(data, requires_grad=False, name=name)

    @classmethod
    def parameter(cls, data: Any, name: str = "") -> "Tensor":
        return cls(data, requires_grad=True, name=name)

    @classmethod
    def zeros(cls, shape: Sequence[int], requires_grad: bool = False, name: str = "") -> "Tensor":
        return cls(np.zeros(tuple(shape)), requires_grad=requires_grad, name=name)

    @classmethod
    def ones(cls, shape: Sequence[int], name: str = "") -> "Tensor":
        return cls(np.ones(tuple(shape)), name=name)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        """Writable copy of the data."""
        return np.array(self.data)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeMismatchError(f"item() needs a single element, got shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def assign(self, data: np.ndarray):
        """Replace the values of a parameter in place (optimizer update)."""
        array = np.array(data, dtype=np.float64)
        if array.shape != self.shape:
            raise ShapeMismatchError(
                f"assign: shape {list(array.shape)} does not match {list(self.shape)}"
            )
        array.flags.writeable = False
        self.data = array

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad}{label})"

    # Arithmetic sugar over ``apply``
    def __add__(self, other: "Tensor") -> "Tensor":
        return apply(OpKind.ADD, [self, other])

    def __sub__(self, other: "Tensor") -> "Tensor":
        return apply(OpKind.SUB, [self, other])

    def __mul__(self, other: Any) -> "Tensor":
        if isinstance(other, Tensor):
            return apply(OpKind.MUL, [self, other])
        return apply(OpKind.SCALAR_MUL, [self], {"scalar": float(other)})

    def __rmul__(self, other: Any) -> "Tensor":
        return self.__mul__(other)

    def __neg__(self) -> "Tensor":
        return apply(OpKind.SCALAR_MUL, [self], {"scalar": -1.0})

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return apply(OpKind.MATMUL, [self, other])

    def __pow__(self, exponent: float) -> "Tensor":
        return apply(OpKind.POWER, [self], {"exponent": float(exponent)})

    @property
    def T(self) -> "Tensor":
        return apply(OpKind.TRANSPOSE, [self])

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply(OpKind.RESHAPE, [self], {"shape": tuple(shape)})

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return apply(OpKind.SUM, [self], {"axis": axis})

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return apply(OpKind.MEAN, [self], {"axis": axis})

    def softmax(self, axis: int = -1) -> "Tensor":
        return apply(OpKind.SOFTMAX, [self], {"axis": axis})

    def sigmoid(self) -> "Tensor":
        return apply(OpKind.SIGMOID, [self])

    def relu(self) -> "Tensor":
        return apply(OpKind.RELU, [self])

    def log(self) -> "Tensor":
        return apply(OpKind.LOG, [self])

    def clamp(self, low: float, high: float) -> "Tensor":
        return apply(OpKind.CLAMP, [self], {"low": float(low), "high": float(high)})


@dataclass
class OpRecord:
    """One recorded op: kind, operand node ids, result node id, saved values."""
    op: OpKind
    input_ids: Tuple[Optional[int], ...]
    output_id: int
    saved: Dict[str, Any] = field(repr=False)


class Tape:
    """Ordered record of tracked operations for one computation.

    Used as a context manager it becomes the current tape of the thread.
    ``clear`` drops every record and invalidates the node ids handed out so far.
    """

    def __init__(self):
        self.records: List[OpRecord] = []
        self._leaves: Dict[int, Tensor] = {}
        self._generation = 0
        self._next_id = 0
        self._previous: List[Optional["Tape"]] = []

    def __enter__(self) -> "Tape":
        self._previous.append(current_tape())
        _thread_state.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _thread_state.tape = self._previous.pop()
        return False

    def __len__(self) -> int:
        return len(self.records)

    @property
    def leaves(self) -> Dict[int, Tensor]:
        return dict(self._leaves)

    def clear(self):
        self.records = []
        self._leaves = {}
        self._generation += 1

    def owns(self, tensor: Tensor) -> bool:
        key = tensor._tape_key
        return key is not None and key[0] is self and key[1] == self._generation

    def _issue(self, tensor: Tensor) -> int:
        node_id = self._next_id
        self._next_id += 1
        tensor.node_id = node_id
        tensor._tape_key = (self, self._generation)
        return node_id

    def track(self, tensor: Tensor) -> Optional[int]:
        """Node id of ``tensor`` on this tape; requires-grad tensors not yet seen become leaves."""
        if self.owns(tensor):
            return tensor.node_id
        if not tensor.requires_grad:
            return None
        node_id = self._issue(tensor)
        self._leaves[node_id] = tensor
        return node_id


# ---------------------------------------------------------------------------
# Op rules: shape check, forward (result + saved values), backward
# ---------------------------------------------------------------------------

def _shape(array: np.ndarray) -> List[int]:
    return list(array.shape)


def _mismatch(op: OpKind, a: np.ndarray, b: np.ndarray, detail: str = "") -> ShapeMismatchError:
    suffix = f" ({detail})" if detail else ""
    return ShapeMismatchError(f"{op.value}: shapes {_shape(a)} and {_shape(b)} do not conform{suffix}")


def _normalize_axis(op: OpKind, axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeMismatchError(f"{op.value}: axis {axis} out of range for {ndim}-d input")
    return axis % ndim


def _as_vector(value: np.ndarray) -> np.ndarray:
    return value.reshape(1) if value.ndim == 0 else value


def _check_same(op: OpKind, xs: List[np.ndarray], attrs: Dict[str, Any]):
    if xs[0].shape != xs[1].shape:
        raise _mismatch(op, xs[0], xs[1])


def _fwd_add(xs, attrs):
    return xs[0] + xs[1], {}


def _bwd_add(g, saved, needs):
    return [g, g]


def _fwd_sub(xs, attrs):
    return xs[0] - xs[1], {}


def _bwd_sub(g, saved, needs):
    return [g, -g]


def _fwd_mul(xs, attrs):
    return xs[0] * xs[1], {"a": xs[0], "b": xs[1]}


def _bwd_mul(g, saved, needs):
    return [g * saved["b"] if needs[0] else None, g * saved["a"] if needs[1] else None]


def _check_scalar_mul(op, xs, attrs):
    scalar = attrs.get("scalar")
    if scalar is None or not np.isfinite(scalar):
        raise ShapeMismatchError(f"{op.value}: needs a finite 'scalar' attribute")


def _fwd_scalar_mul(xs, attrs):
    return xs[0] * attrs["scalar"], {"scalar": attrs["scalar"]}


def _bwd_scalar_mul(g, saved, needs):
    return [g * saved["scalar"]]


def _check_matmul(op, xs, attrs):
    a, b = xs
    if a.ndim != 2 or b.ndim != 2:
        raise _mismatch(op, a, b, "both operands must be 2-d")
    if a.shape[1] != b.shape[0]:
        raise _mismatch(op, a, b)


def _fwd_matmul(xs, attrs):
    return xs[0] @ xs[1], {"a": xs[0], "b": xs[1]}


def _bwd_matmul(g, saved, needs):
    return [
        g @ saved["b"].T if needs[0] else None,
        saved["a"].T @ g if needs[1] else None,
    ]


def _check_transpose(op, xs, attrs):
    axes = attrs.get("axes")
    ndim = xs[0].ndim
    if axes is None:
        if ndim != 2:
            raise ShapeMismatchError(f"{op.value}: default transpose needs 2-d input, got {_shape(xs[0])}")
    elif sorted(axes) != list(range(ndim)):
        raise ShapeMismatchError(f"{op.value}: axes {list(axes)} are not a permutation for {_shape(xs[0])}")


def _fwd_transpose(xs, attrs):
    axes = attrs.get("axes")
    axes = tuple(axes) if axes is not None else (1, 0)
    return np.transpose(xs[0], axes), {"axes": axes}


def _bwd_transpose(g, saved, needs):
    return [np.transpose(g, np.argsort(saved["axes"]))]


def _check_concat(op, xs, attrs):
    if not xs:
        raise ShapeMismatchError(f"{op.value}: needs at least one input")
    first = xs[0]
    axis = _normalize_axis(op, attrs.get("axis", 0), first.ndim)
    for other in xs[1:]:
        if other.ndim != first.ndim:
            raise _mismatch(op, first, other, "rank differs")
        for dim in range(first.ndim):
            if dim != axis and other.shape[dim] != first.shape[dim]:
                raise _mismatch(op, first, other, f"axis {dim} differs")


def _fwd_concat(xs, attrs):
    axis = attrs.get("axis", 0) % xs[0].ndim
    sizes = [x.shape[axis] for x in xs]
    return np.concatenate(xs, axis=axis), {"axis": axis, "sizes": sizes}


def _bwd_concat(g, saved, needs):
    bounds = np.cumsum(saved["sizes"])[:-1]
    return list(np.split(g, bounds, axis=saved["axis"]))


def _check_reshape(op, xs, attrs):
    shape = tuple(attrs.get("shape", ()))
    if not shape or any(int(d) < 1 for d in shape):
        raise ShapeMismatchError(f"{op.value}: target shape {list(shape)} must have positive sizes")
    if int(np.prod(shape)) != xs[0].size:
        raise ShapeMismatchError(f"{op.value}: cannot reshape {_shape(xs[0])} to {list(shape)}")


def _fwd_reshape(xs, attrs):
    return xs[0].reshape(tuple(attrs["shape"])), {"shape": xs[0].shape}


def _bwd_reshape(g, saved, needs):
    return [g.reshape(saved["shape"])]


def _check_reduce(op, xs, attrs):
    axis = attrs.get("axis")
    if axis is not None:
        _normalize_axis(op, axis, xs[0].ndim)


def _reduce_forward(x, axis, mean: bool):
    if axis is None:
        out = np.array([x.mean() if mean else x.sum()])
        keep = (1,) * x.ndim
    else:
        axis = axis % x.ndim
        out = _as_vector(x.mean(axis=axis) if mean else x.sum(axis=axis))
        keep = tuple(1 if d == axis else n for d, n in enumerate(x.shape))
    count = x.size if axis is None else x.shape[axis]
    return out, {"keep": keep, "shape": x.shape, "count": count}


def _fwd_sum(xs, attrs):
    return _reduce_forward(xs[0], attrs.get("axis"), mean=False)


def _bwd_sum(g, saved, needs):
    return [np.broadcast_to(g.reshape(saved["keep"]), saved["shape"]).copy()]


def _fwd_mean(xs, attrs):
    return _reduce_forward(xs[0], attrs.get("axis"), mean=True)


def _bwd_mean(g, saved, needs):
    spread = np.broadcast_to(g.reshape(saved["keep"]), saved["shape"])
    return [spread / saved["count"]]


def _check_softmax(op, xs, attrs):
    _normalize_axis(op, attrs.get("axis", -1), xs[0].ndim)


def _fwd_softmax(xs, attrs):
    axis = attrs.get("axis", -1) % xs[0].ndim
    shifted = xs[0] - xs[0].max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return y, {"y": y, "axis": axis}


def _bwd_softmax(g, saved, needs):
    y = saved["y"]
    inner = (g * y).sum(axis=saved["axis"], keepdims=True)
    return [y * (g - inner)]


def _fwd_sigmoid(xs, attrs):
    x = xs[0]
    # Split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return y, {"y": y}


def _bwd_sigmoid(g, saved, needs):
    y = saved["y"]
    return [g * y * (1.0 - y)]


def _fwd_relu(xs, attrs):
    return np.maximum(xs[0], 0.0), {"positive": xs[0] > 0}


def _bwd_relu(g, saved, needs):
    return [g * saved["positive"]]


def _check_log(op, xs, attrs):
    if np.any(xs[0] <= 0):
        raise DomainError(f"{op.value}: input must be strictly positive")


def _fwd_log(xs, attrs):
    return np.log(xs[0]), {"x": xs[0]}


def _bwd_log(g, saved, needs):
    return [g / saved["x"]]


def _check_power(op, xs, attrs):
    exponent = attrs.get("exponent")
    if exponent is None or not np.isfinite(exponent):
        raise ShapeMismatchError(f"{op.value}: needs a finite 'exponent' attribute")
    if np.any(xs[0] < 0):
        raise DomainError(f"{op.value}: defined for non-negative inputs only")


def _fwd_power(xs, attrs):
    p = attrs["exponent"]
    return np.power(xs[0], p), {"x": xs[0], "p": p}


def _bwd_power(g, saved, needs):
    x, p = saved["x"], saved["p"]
    if p == 0:
        return [np.zeros_like(g)]
    positive = x > 0
    safe = np.where(positive, x, 1.0)
    slope = np.where(positive, p * np.power(safe, p - 1.0), 1.0 if p == 1 else 0.0)
    return [g * slope]


def _check_clamp(op, xs, attrs):
    low, high = attrs.get("low"), attrs.get("high")
    if low is None or high is None or not low < high:
        raise ShapeMismatchError(f"{op.value}: needs attributes low < high")


def _fwd_clamp(xs, attrs):
    x = xs[0]
    inside = (x > attrs["low"]) & (x < attrs["high"])
    return np.clip(x, attrs["low"], attrs["high"]), {"inside": inside}


def _bwd_clamp(g, saved, needs):
    return [g * saved["inside"]]


@dataclass(frozen=True)
class _Rule:
    arity: Optional[int]
    forward: Callable
    backward: Callable
    check: Optional[Callable] = None


_RULES: Dict[OpKind, _Rule] = {
    OpKind.ADD: _Rule(2, _fwd_add, _bwd_add, _check_same),
    OpKind.SUB: _Rule(2, _fwd_sub, _bwd_sub, _check_same),
    OpKind.MUL: _Rule(2, _fwd_mul, _bwd_mul, _check_same),
    OpKind.SCALAR_MUL: _Rule(1, _fwd_scalar_mul, _bwd_scalar_mul, _check_scalar_mul),
    OpKind.MATMUL: _Rule(2, _fwd_matmul, _bwd_matmul, _check_matmul),
    OpKind.TRANSPOSE: _Rule(1, _fwd_transpose, _bwd_transpose, _check_transpose),
    OpKind.CONCAT: _Rule(None, _fwd_concat, _bwd_concat, _check_concat),
    OpKind.RESHAPE: _Rule(1, _fwd_reshape, _bwd_reshape, _check_reshape),
    OpKind.MEAN: _Rule(1, _fwd_mean, _bwd_mean, _check_reduce),
    OpKind.SUM: _Rule(1, _fwd_sum, _bwd_sum, _check_reduce),
    OpKind.SOFTMAX: _Rule(1, _fwd_softmax, _bwd_softmax, _check_softmax),
    OpKind.SIGMOID: _Rule(1, _fwd_sigmoid, _bwd_sigmoid),
    OpKind.RELU: _Rule(1, _fwd_relu, _bwd_relu),
    OpKind.LOG: _Rule(1, _fwd_log, _bwd_log, _check_log),
    OpKind.POWER: _Rule(1, _fwd_power, _bwd_power, _check_power),
    OpKind.CLAMP: _Rule(1, _fwd_clamp, _bwd_clamp, _check_clamp),
}


def apply(op: Any, inputs: Sequence[Tensor], attrs: Optional[Dict[str, Any]] = None) -> Tensor:
    """Run one op forward, recording it on the current tape when gradients are needed."""
    try:
        kind = OpKind(op)
    except ValueError:
        raise UnknownOpError(f"Unknown op: {op!r}") from None
    rule = _RULES[kind]
    attrs = dict(attrs or {})
    inputs = list(inputs)
    if rule.arity is not None and len(inputs) != rule.arity:
        raise ShapeMismatchError(f"{kind.value}: expects {rule.arity} inputs, got {len(inputs)}")

    arrays = [t.data for t in inputs]
    if rule.check is not None:
        rule.check(kind, arrays, attrs)
    result, saved = rule.forward(arrays, attrs)
    result = _as_vector(np.asarray(result, dtype=np.float64))
    if not np.all(np.isfinite(result)):
        raise DomainError(f"{kind.value}: produced non-finite values")

    out = Tensor(result)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        input_ids = tuple(tape.track(t) for t in inputs)
        out.requires_grad = True
        tape.records.append(OpRecord(kind, input_ids, tape._issue(out), saved))
    return out


def backward(loss: Tensor) -> Dict[int, Tensor]:
    """Gradients of a scalar ``loss`` for every requires-grad leaf on its tape."""
    if loss.shape != (1,):
        raise TapeError(f"backward needs a scalar loss of shape [1], got {list(loss.shape)}")
    key = loss._tape_key
    if key is None or not key[0].owns(loss):
        raise TapeError("loss is not attached to a live tape (tape cleared or never recorded)")
    tape = key[0]

    grads: Dict[int, np.ndarray] = {loss.node_id: np.ones(1)}
    for record in reversed(tape.records):
        g = grads.pop(record.output_id, None)
        if g is None:
            continue
        needs = tuple(node_id is not None for node_id in record.input_ids)
        input_grads = _RULES[record.op].backward(g, record.saved, needs)
        for node_id, input_grad in zip(record.input_ids, input_grads):
            if node_id is None or input_grad is None:
                continue
            if node_id in grads:
                grads[node_id] = grads[node_id] + input_grad
            else:
                grads[node_id] = input_grad

    result = {}
    for node_id, leaf in tape._leaves.items():
        g = grads.get(node_id)
        result[node_id] = Tensor(g if g is not None else np.zeros(leaf.shape))
    return result


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients of ``f`` at ``x``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    point = Tensor.parameter(x.data)
    with Tape():
        out = f(point)
        if out.shape != (1,):
            raise TapeError(f"grad_check needs a scalar-valued function, got shape {list(out.shape)}")
        if out.requires_grad:
            analytic = backward(out)[point.node_id].data
        else:
            analytic = np.zeros(x.shape)

    base = x.numpy()
    numeric = np.zeros_like(base)
    for index in np.ndindex(base.shape):
        plus = base.copy()
        minus = base.copy()
        plus[index] += eps
        minus[index] -= eps
        numeric[index] = (f(Tensor.constant(plus)).item() - f(Tensor.constant(minus)).item()) / (2 * eps)

    error = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(error.max())


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return apply(OpKind.CONCAT, tensors, {"axis": axis})


def row_selector(rows: Sequence[int], num_rows: int, average: bool = False) -> Tensor:
    """Constant matrix picking (or averaging) 0-based ``rows`` of an ``num_rows``-row operand."""
    rows = list(rows)
    if not rows:
        raise ShapeMismatchError("row_selector needs at least one row")
    if average:
        matrix = np.zeros((1, num_rows))
        for r in rows:
            matrix[0, r] += 1.0 / len(rows)
    else:
        matrix = np.zeros((len(rows), num_rows))
        matrix[np.arange(len(rows)), rows] = 1.0
    return Tensor.constant(matrix)


def add_row_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a ``[1, d]`` bias to every row of ``x`` via an explicit ones column."""
    ones = Tensor.ones((x.shape[0], 1))
    return x + ones @ bias


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``[n_out, n_in]`` 1-d linear interpolation weights (half-pixel centres, edge clamped)."""
    matrix = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        matrix[i, lo] += 1.0 - frac
        matrix[i, hi] += frac
    return matrix


def bilinear_upsampler(in_hw: Tuple[int, int], out_hw: Tuple[int, int]) -> Tensor:
    """Constant ``[out_h*out_w, in_h*in_w]`` matrix resampling row-major flattened grids."""
    rows = interpolation_matrix(in_hw[0], out_hw[0])
    cols = interpolation_matrix(in_hw[1], out_hw[1])
    return Tensor.constant(np.kron(rows, cols))
