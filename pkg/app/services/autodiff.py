"""
Dense float64 tensors with reverse-mode automatic differentiation.

Every operation computes its forward value eagerly. When a ComputeTape is
active in the current context, the operation is also recorded on it together
with a closure that maps the output gradient to input gradients.
"""
import contextvars
import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit
from scipy.special import softmax as _softmax

from ..errors import ContractError, DimensionError, NumericError

logger = logging.getLogger(__name__)

_ids = itertools.count(1)
_active_tape: contextvars.ContextVar = contextvars.ContextVar("active_tape", default=None)

UNARY_KINDS = ("sigmoid", "tanh", "relu", "negate", "square")

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Immutable n-dimensional float64 array with a process-unique id"""

    __slots__ = ("_data", "_id")

    def __init__(self, data: ArrayLike):
        if isinstance(data, Tensor):
            data = data._data
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self._data = arr
        self._id = next(_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        out._data = arr
        out._id = next(_ids)
        return out

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def id(self) -> int:
        return self._id

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def item(self) -> float:
        if self._data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, id={self._id})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: float) -> "Tensor":
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return map_unary(self, "negate")


ParamSet = Dict[str, Tensor]


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x: ArrayLike) -> Tensor:
    """A tensor that no parameter depends on; identical to Tensor(x)"""
    return as_tensor(x)


@dataclass(frozen=True)
class TapeNode:
    kind: str
    inputs: Tuple[int, ...]
    output: int
    vjp: VJP = field(repr=False)


class ComputeTape:
    """
    Ordered record of the operations of one forward pass.

    Use as a context manager; operations issued inside the block are recorded
    in execution order, which is a topological order by construction.
    """

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self._produced: set = set()
        self._tokens: List[contextvars.Token] = []

    def __enter__(self) -> "ComputeTape":
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, kind: str, inputs: Sequence[Tensor], output: Tensor, vjp: VJP) -> None:
        self.nodes.append(TapeNode(kind, tuple(t.id for t in inputs), output.id, vjp))
        self._produced.add(output.id)

    def produced(self, tensor: Tensor) -> bool:
        return tensor.id in self._produced


class _Suspended:
    def __enter__(self):
        self._token = _active_tape.set(None)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)


def suspended() -> _Suspended:
    """Context in which operations are evaluated but not recorded"""
    return _Suspended()


def active_tape() -> Optional[ComputeTape]:
    return _active_tape.get()


def custom_op(kind: str, inputs: Sequence[Tensor], data: np.ndarray, vjp: VJP) -> Tensor:
    """Emit a result with a caller-supplied backward rule"""
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{kind} produced non-finite values")
    out = Tensor._wrap(data)
    tape = _active_tape.get()
    if tape is not None:
        tape.record(kind, inputs, out, vjp)
    return out


_emit = custom_op


# --- linear algebra -------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    Matrix product over the last two axes.

    a may carry leading batch extents; b is either a plain matrix shared by
    every batch element or has exactly the same leading extents as a.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul: batch extents differ between {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    shared = b.ndim == 2

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit("matmul", (a, b), ad @ bd, vjp)


def transpose_last(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise DimensionError(f"transpose_last needs rank >= 2, got {x.shape}")
    return _emit("transpose", (x,), np.swapaxes(x.data, -1, -2),
                 lambda g: (np.swapaxes(g, -1, -2),))


# --- elementwise ----------------------------------------------------------

def _check_bias_compatible(op: str, a: Tensor, b: Tensor) -> bool:
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def _reduce_bias(g: np.ndarray, width: int) -> np.ndarray:
    return g.reshape(-1, width).sum(axis=0)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise sum; b may also be a bias vector over a's last axis"""
    a, b = as_tensor(a), as_tensor(b)
    bias = _check_bias_compatible("add", a, b)
    width = b.shape[0] if bias else 0
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (g, _reduce_bias(g, width) if bias else g))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    bias = _check_bias_compatible("sub", a, b)
    width = b.shape[0] if bias else 0
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (g, -_reduce_bias(g, width) if bias else -g))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Hadamard product of equally shaped tensors"""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(x: Tensor, factor: float) -> Tensor:
    return _emit("scale", (x,), x.data * factor, lambda g: (g * factor,))


def map_unary(x: ArrayLike, f: str) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    if f == "sigmoid":
        y = expit(xd)
        return _emit(f, (x,), y, lambda g: (g * y * (1.0 - y),))
    if f == "tanh":
        y = np.tanh(xd)
        return _emit(f, (x,), y, lambda g: (g * (1.0 - y * y),))
    if f == "relu":
        mask = (xd > 0).astype(np.float64)
        return _emit(f, (x,), xd * mask, lambda g: (g * mask,))
    if f == "negate":
        return _emit(f, (x,), -xd, lambda g: (-g,))
    if f == "square":
        return _emit(f, (x,), xd * xd, lambda g: (2.0 * xd * g,))
    raise ContractError(f"unknown unary function {f!r}; expected one of {UNARY_KINDS}")


def sigmoid(x: ArrayLike) -> Tensor:
    return map_unary(x, "sigmoid")


def tanh(x: ArrayLike) -> Tensor:
    return map_unary(x, "tanh")


def relu(x: ArrayLike) -> Tensor:
    return map_unary(x, "relu")


def square(x: ArrayLike) -> Tensor:
    return map_unary(x, "square")


def softmax_rows(x: ArrayLike) -> Tensor:
    """Softmax over the last axis, shifted by the row maximum"""
    x = as_tensor(x)
    if x.ndim < 1:
        raise DimensionError("softmax_rows needs at least one axis")
    y = _softmax(x.data, axis=-1)

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), y, vjp)


# --- shape manipulation ---------------------------------------------------

def concat_last(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.ndim == 0 or a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat_last: leading extents of {a.shape} and {b.shape} differ")
    cut = a.shape[-1]
    return _emit("concat", (a, b), np.concatenate([a.data, b.data], axis=-1),
                 lambda g: (g[..., :cut], g[..., cut:]))


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    width = x.shape[-1]
    if not 0 <= start < stop <= width:
        raise DimensionError(f"slice_last: [{start}, {stop}) outside last extent {width}")

    def vjp(g):
        full = np.zeros(x.shape)
        full[..., start:stop] = g
        return (full,)

    return _emit("slice_last", (x,), x.data[..., start:stop], vjp)


def split_last(x: Tensor, at: int) -> Tuple[Tensor, Tensor]:
    return slice_last(x, 0, at), slice_last(x, at, x.shape[-1])


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    try:
        y = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {original} as {tuple(shape)}") from e
    return _emit("reshape", (x,), y, lambda g: (g.reshape(original),))


def index_axis(x: Tensor, index: int, axis: int) -> Tensor:
    """x.take(index, axis) with the axis removed"""
    axis = axis % x.ndim

    def vjp(g):
        full = np.zeros(x.shape)
        slicer = [slice(None)] * x.ndim
        slicer[axis] = index
        full[tuple(slicer)] = g
        return (full,)

    return _emit("index", (x,), np.take(x.data, index, axis=axis), vjp)


def stack(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ContractError("stack needs at least one tensor")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    axis = axis % out.ndim
    count = len(tensors)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(count))

    return _emit("stack", tuple(tensors), out, vjp)


def slice_axis(x: Tensor, start: int, stop: int, axis: int) -> Tensor:
    axis = axis % x.ndim
    slicer = [slice(None)] * x.ndim
    slicer[axis] = slice(start, stop)
    slicer = tuple(slicer)

    def vjp(g):
        full = np.zeros(x.shape)
        full[slicer] = g
        return (full,)

    return _emit("slice", (x,), x.data[slicer], vjp)


def pad_front(x: Tensor, count: int, axis: int) -> Tensor:
    """Prepend `count` zeros along `axis`"""
    axis = axis % x.ndim
    widths = [(0, 0)] * x.ndim
    widths[axis] = (count, 0)
    slicer = [slice(None)] * x.ndim
    slicer[axis] = slice(count, None)
    slicer = tuple(slicer)
    return _emit("pad_front", (x,), np.pad(x.data, widths), lambda g: (g[slicer],))


# --- reductions and losses ------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", (x,), np.sum(x.data), lambda g: (np.full(shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _emit("mean", (x,), np.mean(x.data), lambda g: (np.full(shape, float(g) / n),))


def mse(pred: ArrayLike, target: ArrayLike) -> Tensor:
    """Mean of squared differences over every element"""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: prediction {pred.shape} and target {target.shape} differ")
    diff = pred.data - target.data
    n = diff.size

    def vjp(g):
        gp = (2.0 / n) * float(g) * diff
        return gp, -gp

    return _emit("mse", (pred, target), np.mean(diff * diff), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the learned scale and shift"""
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise DimensionError(
            f"layer_norm: scale {gamma.shape} / shift {beta.shape} do not match last extent of {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    gd = gamma.data

    def vjp(g):
        g_hat = g * gd
        gx = inv_std * (g_hat - g_hat.mean(axis=-1, keepdims=True)
                        - xhat * (g_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _reduce_bias(g * xhat, width), _reduce_bias(g, width)

    return _emit("layer_norm", (x, gamma, beta), xhat * gd + beta.data, vjp)


# --- reverse pass ---------------------------------------------------------

class GradientMap(Mapping[str, np.ndarray]):
    """Parameter name -> gradient array, shape-matched to the parameter"""

    def __init__(self, entries: Dict[str, np.ndarray]):
        self._entries = entries

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self._entries.values())))

    def scaled(self, factor: float) -> "GradientMap":
        return GradientMap({k: g * factor for k, g in self._entries.items()})


def backward(tape: ComputeTape, loss: Tensor, params: Optional[Mapping[str, Tensor]] = None) -> GradientMap:
    """
    Replay the tape in reverse from a scalar loss.

    Gradients of tensors consumed more than once are summed. Parameters not
    on any path to the loss get zero gradients of their own shape. Without
    `params`, the map is keyed by the string id of every leaf that received
    a gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ContractError("loss was not produced on this tape")

    grads: Dict[int, np.ndarray] = {loss.id: np.ones(loss.shape)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output, None)
        if g is None:
            continue
        for tid, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            prev = grads.get(tid)
            grads[tid] = gi if prev is None else prev + gi

    if params is None:
        return GradientMap({str(tid): g for tid, g in grads.items()})
    out = {}
    for name, p in params.items():
        g = grads.get(p.id)
        out[name] = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
    return GradientMap(out)


# --- finite-difference validation ----------------------------------------

@dataclass(frozen=True)
class GradCheckEntry:
    name: str
    index: Tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: List[GradCheckEntry]

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def failures(self) -> List[GradCheckEntry]:
        return [e for e in self.entries if not e.passed]

    def per_parameter(self) -> Dict[str, bool]:
        verdict: Dict[str, bool] = {}
        for e in self.entries:
            verdict[e.name] = verdict.get(e.name, True) and e.passed
        return verdict

    @property
    def max_rel_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)


def grad_check(f: Callable[[ParamSet], Tensor], params: ParamSet,
               h: float = 1e-6, tol: float = 1e-4, floor: float = 1e-5) -> GradCheckReport:
    """
    Compare backward() against central differences (f(x+h) - f(x-h)) / 2h.

    Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor);
    the floor keeps vanishing gradients from being judged on round-off alone.
    """
    if h <= 0:
        raise ContractError(f"finite-difference step must be positive, got {h}")
    with ComputeTape() as tape:
        loss = f(dict(params))
    if loss.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {loss.shape}")
    analytic = backward(tape, loss, params)

    entries = []
    for name, p in params.items():
        base = p.data
        for idx in np.ndindex(*p.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += h
            minus[idx] -= h
            with suspended():
                fp = f({**params, name: Tensor(plus)}).item()
                fm = f({**params, name: Tensor(minus)}).item()
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic[name][idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            entries.append(GradCheckEntry(name, tuple(int(i) for i in idx), a, numeric, rel, rel <= tol))

    report = GradCheckReport(entries)
    if not report.passed:
        logger.debug("grad_check: %d of %d elements failed", len(report.failures()), len(entries))
    return report
