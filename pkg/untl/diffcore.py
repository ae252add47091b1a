"""
Reverse-mode automatic differentiation over dense float64 numpy tensors.

Ops are recorded onto the innermost active :class:`Graph` as they run
(define-by-run). ``backward`` walks the recorded ops in reverse and
accumulates gradients into every tensor that requires them.
"""

import contextlib
import inspect
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from untl.common import ConfigError, GraphError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

Number = Union[int, float]

# Innermost graph last
_ACTIVE: List['Graph'] = []

# Test hook: op kind -> factor applied to that op's input gradients
_BACKWARD_SCALE: Dict[str, float] = {}


class Tensor:
    """A float64 array with an optional gradient buffer of the same shape"""

    __slots__ = ('data', 'requires_grad', 'grad')

    def __init__(self, data, requires_grad: bool = False):
        array = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise NonFiniteError("tensor constructed from non-finite values")
        self.data = array
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(array) if requires_grad else None

    @classmethod
    def _from_op(cls, kind: str, value: np.ndarray, requires_grad: bool) -> 'Tensor':
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"{kind} produced non-finite values")
        out = cls.__new__(cls)
        out.data = value
        out.requires_grad = requires_grad
        out.grad = np.zeros_like(value) if requires_grad else None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other: Number):
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(data) -> Tensor:
    """Tensor that never receives gradients"""
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    """Leaf tensor with a gradient buffer"""
    return Tensor(data, requires_grad=True)


@dataclass
class OpRecord:
    """One executed op: kind, its input tensors, its output and the local vector-Jacobian product"""
    kind: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

    @property
    def input_ids(self) -> Tuple[int, ...]:
        return tuple(id(t) for t in self.inputs)

    @property
    def output_id(self) -> int:
        return id(self.output)


class Graph:
    """Topologically ordered tape of op records"""

    def __init__(self):
        self.records: List[OpRecord] = []
        self.output: Optional[Tensor] = None

    def __enter__(self) -> 'Graph':
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)


def _emit(kind: str, inputs: Sequence[Tensor], value: np.ndarray, vjp) -> Tensor:
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor._from_op(kind, value, requires_grad)
    if requires_grad and _ACTIVE:
        _ACTIVE[-1].records.append(OpRecord(kind, tuple(inputs), out, vjp))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape('add', a, b)
    return _emit('add', (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape('sub', a, b)
    return _emit('sub', (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product"""
    _broadcast_shape('mul', a, b)
    return _emit('mul', (a, b), a.data * b.data,
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, factor: Number) -> Tensor:
    factor = float(factor)
    return _emit('scalar-mul', (a,), a.data * factor, lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} differ") from None

    def vjp(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _emit('matmul', (a, b), np.matmul(a.data, b.data), vjp)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes"""
    if a.ndim < 2:
        raise ShapeError(f"transpose: need at least 2 dimensions, got {a.shape}")
    return _emit('transpose', (a,), np.swapaxes(a.data, -1, -2).copy(),
                 lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        value = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _emit('reshape', (a,), value.copy(), lambda g: (g.reshape(a.shape),))


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = a.data > 0
    return _emit('relu', (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    value = np.exp(a.data)
    return _emit('exp', (a,), value, lambda g: (g * value,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFiniteError(f"log of non-positive value (min {a.data.min():.3g})")
    return _emit('log', (a,), np.log(a.data), lambda g: (g / a.data,))


def sum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit('sum', (a,), np.sum(a.data, axis=axis, keepdims=keepdims), vjp)


def mean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _emit('mean', (a,), np.mean(a.data, axis=axis, keepdims=keepdims), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (value * (g - np.sum(g * value, axis=axis, keepdims=True)),)

    return _emit('softmax', (a,), value, vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    value = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(value)

    def vjp(g):
        return (g - probs * np.sum(g, axis=axis, keepdims=True),)

    return _emit('log-softmax', (a,), value, vjp)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("concat-rows: nothing to concatenate")
    trailing = {t.shape[1:] for t in tensors}
    if len(trailing) != 1:
        raise ShapeError(f"concat-rows: row shapes differ {[t.shape for t in tensors]}")
    splits = np.cumsum([t.shape[0] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=0))

    return _emit('concat-rows', tuple(tensors), np.concatenate([t.data for t in tensors], axis=0), vjp)


def take(a: Tensor, indices, axis: int = 0, kind: str = 'take') -> Tensor:
    """Gather entries along ``axis``; the result replaces that axis with the index shape"""
    idx = np.asarray(indices, dtype=np.int64)
    size = a.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise ShapeError(f"{kind}: index out of range for axis {axis} of shape {a.shape}")

    def vjp(g):
        out = np.zeros(a.shape)
        moved = np.moveaxis(out, axis, 0)
        g_moved = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, g_moved)
        return (out,)

    return _emit(kind, (a,), np.take(a.data, idx, axis=axis), vjp)


def slice_rows(a: Tensor, rows) -> Tensor:
    return take(a, rows, axis=0, kind='slice-rows')


def clamp_max(a: Tensor, bound: float) -> Tensor:
    """min(a, bound); at a == bound the constant branch is taken (gradient 0)"""
    mask = a.data < bound
    return _emit('clamp-max', (a,), np.where(mask, a.data, float(bound)), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------

def forward(graph: Graph, fn: Callable[..., Tensor], inputs: Dict[str, object]) -> Tensor:
    """Run ``fn(**inputs)`` while recording onto ``graph``; intermediates stay cached in the records"""
    try:
        inspect.signature(fn).bind(**inputs)
    except TypeError as e:
        raise GraphError(f"inputs do not bind to {getattr(fn, '__name__', fn)}: {e}") from None

    with graph:
        out = fn(**inputs)
    if not isinstance(out, Tensor):
        raise GraphError(f"forward must produce a Tensor, got {type(out).__name__}")
    graph.output = out
    return out


def backward(graph: Graph, output: Tensor) -> None:
    """Accumulate d(output)/d(t) into ``t.grad`` for every tensor in the graph that requires grad"""
    if not graph.records:
        raise GraphError("backward called before forward: graph has no recorded ops")
    if output.data.size != 1:
        raise GraphError(f"backward needs a scalar output, got shape {output.shape}")
    produced = {rec.output_id for rec in graph.records}
    if id(output) not in produced:
        raise GraphError("output was not produced by this graph")

    pending: Dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    tensors: Dict[int, Tensor] = {id(output): output}

    for rec in reversed(graph.records):
        g = pending.pop(rec.output_id, None)
        if g is None:
            continue
        rec.output.grad += g
        input_grads = rec.vjp(g)
        factor = _BACKWARD_SCALE.get(rec.kind)
        for tensor, grad in zip(rec.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            if factor is not None:
                grad = grad * factor
            if not np.all(np.isfinite(grad)):
                raise NonFiniteError(f"non-finite gradient flowing out of {rec.kind}")
            key = id(tensor)
            pending[key] = pending[key] + grad if key in pending else grad
            tensors[key] = tensor

    # whatever is left has no producing record: leaves
    for key, grad in pending.items():
        tensors[key].grad += grad


def zero_grad(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        if t.grad is not None:
            t.grad[...] = 0.0


@contextlib.contextmanager
def corrupt_backward(kind: str, factor: float = 1.5):
    """Scale the gradients of one op kind; used to prove the checker catches bad derivatives"""
    _BACKWARD_SCALE[kind] = factor
    try:
        yield
    finally:
        _BACKWARD_SCALE.pop(kind, None)


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------

def _evaluate(function: Callable[[], Tensor]) -> float:
    with Graph():
        value = function()
    result = value.item()
    if not np.isfinite(result):
        raise NonFiniteError("function value is not finite")
    return result


def _sample_entries(params: Sequence[Tensor], max_entries: int, seed: int) -> List[Tuple[int, int]]:
    """Round-robin over tensors so every parameter block is checked"""
    rng = np.random.default_rng(seed)
    orders = [rng.permutation(p.data.size) for p in params]
    entries: List[Tuple[int, int]] = []
    depth = 0
    while len(entries) < max_entries and any(depth < o.size for o in orders):
        for i, order in enumerate(orders):
            if depth < order.size and len(entries) < max_entries:
                entries.append((i, int(order[depth])))
        depth += 1
    return entries


def _central_difference(function, tensor: Tensor, flat: int, step: float, tolerance: float) -> float:
    original = tensor.data.flat[flat]
    base = _evaluate(function)
    h = step
    try:
        for attempt in range(3):
            tensor.data.flat[flat] = original + h
            plus = _evaluate(function)
            tensor.data.flat[flat] = original - h
            minus = _evaluate(function)
            central = (plus - minus) / (2 * h)
            # one-sided slopes disagree when a ReLU kink sits inside [x-h, x+h]
            gap = abs((plus - base) / h - (base - minus) / h)
            if gap <= tolerance * max(1.0, abs(central)):
                break
            logger.debug("kink suspected at entry %d (gap %.3g); refining step %.1e", flat, gap, h)
            h /= 100.0
    finally:
        tensor.data.flat[flat] = original
    return central


def grad_check(function: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
               tolerance: float = 1e-5, max_entries: int = 64, seed: int = 0) -> float:
    """
    Compare analytic gradients of a scalar ``function()`` against central differences.

    Returns max |analytic - numeric| / max(1, |analytic|) over up to ``max_entries``
    parameter entries.
    """
    if step <= 0:
        raise ConfigError(f"finite-difference step must be positive, got {step}")

    zero_grad(params)
    graph = Graph()
    out = forward(graph, function, {})
    if not np.isfinite(out.item()):
        raise NonFiniteError("function value is not finite")
    backward(graph, out)
    analytic = [p.grad.copy() for p in params]
    zero_grad(params)

    worst = 0.0
    for index, flat in _sample_entries(params, max_entries, seed):
        numeric = _central_difference(function, params[index], flat, step, tolerance)
        exact = analytic[index].flat[flat]
        worst = max(worst, abs(exact - numeric) / max(1.0, abs(exact)))

    if worst > tolerance:
        logger.warning("gradient check failed: max relative error %.3e > %.1e", worst, tolerance)
    return worst
