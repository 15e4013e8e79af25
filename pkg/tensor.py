"""
CrossFundus tensor core
Dense numpy-backed tensors, a recording tape and exact reverse-mode gradients
"""

import contextlib
import logging
import math
import threading
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from errors import GraphError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

_DTYPES = {32: np.float32, 64: np.float64}
_precision_bits = 32
_local = threading.local()

ArrayLike = Union[np.ndarray, Sequence, float, int]


def set_precision(bits: int) -> None:
    """Select the run-level float width (32 for training, 64 for verification)"""
    global _precision_bits
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _precision_bits = bits


def get_precision() -> int:
    return _precision_bits


def default_dtype() -> type:
    return _DTYPES[_precision_bits]


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    previous = _precision_bits
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(previous)


class Tensor:
    """Immutable n-dimensional value; row-major numpy storage"""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="expected a single element")
        return float(self.data.reshape(()))

    def assert_finite(self, what: str = "tensor") -> "Tensor":
        check_finite(self, what)
        return self

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


class Param(Tensor):
    """Trainable leaf: mutable value plus an accumulated gradient of the same shape"""

    __slots__ = ("grad",)

    def __init__(self, data: ArrayLike, name: str):
        arr = np.array(data, dtype=np.asarray(data).dtype if _is_float(data) else default_dtype())
        super().__init__(arr, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def assign(self, values: np.ndarray) -> None:
        values = np.asarray(values)
        if values.shape != self.data.shape:
            raise ShapeError("assign", self.data.shape, values.shape, detail=self.name or "")
        self.data = values.astype(self.data.dtype, copy=True)
        if self.grad.dtype != self.data.dtype:
            self.grad = self.grad.astype(self.data.dtype)


def _is_float(data: ArrayLike) -> bool:
    return isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)


def check_finite(x: Tensor, what: str = "tensor") -> None:
    if not np.all(np.isfinite(x.data)):
        bad = int(np.size(x.data) - np.count_nonzero(np.isfinite(x.data)))
        raise NonFiniteError(f"{what} has {bad} non-finite element(s) in shape {x.shape}")


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: Tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Graph:
    """Operation tape; ops record onto the innermost active graph of the current thread"""

    def __init__(self):
        self.nodes: List[_Node] = []
        self.kinks: List[np.ndarray] = []
        self._outputs: Dict[int, _Node] = {}

    def __enter__(self) -> "Graph":
        stack = getattr(_local, "graphs", None)
        if stack is None:
            stack = _local.graphs = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _local.graphs.pop()

    def record(self, out: Tensor, inputs: Tuple[Tensor, ...], backward: Callable) -> None:
        node = _Node(out, inputs, backward)
        self.nodes.append(node)
        self._outputs[id(out)] = node

    def record_kink(self, mask: np.ndarray) -> None:
        """Branch mask of a piecewise op (ReLU, max); used to detect kink crossings"""
        self.kinks.append(mask.copy())

    def contains(self, t: Tensor) -> bool:
        return id(t) in self._outputs and self._outputs[id(t)].out is t

    def __len__(self) -> int:
        return len(self.nodes)


def active_graph() -> Optional[Graph]:
    stack = getattr(_local, "graphs", None)
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_record() -> Iterator[None]:
    """Suspend recording on this thread, even inside an active graph"""
    stack = getattr(_local, "graphs", None)
    if stack is None:
        stack = _local.graphs = []
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def _result(data: np.ndarray, inputs: Tuple[Tensor, ...], backward: Callable) -> Tensor:
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    graph = active_graph()
    if graph is not None and needs_grad:
        graph.record(out, inputs, backward)
    return out


def _kink(mask: np.ndarray) -> None:
    graph = active_graph()
    if graph is not None:
        graph.record_kink(mask)


def backward(graph: Graph, loss: Tensor, grads: Optional[Dict[str, np.ndarray]] = None) -> None:
    """Accumulate d(loss)/d(param) into every reachable Param.

    With `grads` given, gradients are accumulated into that mapping (keyed by
    param name) instead of Param.grad, so independent graphs can run in parallel.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not graph.contains(loss):
        raise GraphError("loss was not produced on this graph")

    cotangents: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = cotangents.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if isinstance(inp, Param):
                if grads is None:
                    inp.grad += gi
                elif inp.name in grads:
                    grads[inp.name] += gi
                else:
                    grads[inp.name] = np.array(gi, copy=True)
            else:
                key = id(inp)
                if key in cotangents:
                    cotangents[key] = cotangents[key] + gi
                else:
                    cotangents[key] = gi


def zero_grads(params: Iterable[Param]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a[..., m, p] @ b[p, n]; leading axes of `a` act as a batch over a shared matrix"""
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def grad_fn(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _result(out, (a, b), grad_fn)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product a[..., m, p] @ b[..., p, n] with identical leading axes"""
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError("bmm", a.shape, b.shape)
    out = a.data @ b.data

    def grad_fn(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _result(out, (a, b), grad_fn)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("permute", x.shape, axes, detail="axes must be a permutation")
    inverse = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)

    def grad_fn(g):
        return (np.transpose(g, inverse),)

    return _result(out, (x,), grad_fn)


def transpose_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError("reshape", x.shape, shape)
    out = x.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError("concat", *(t.shape for t in tensors), detail=f"axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def grad_fn(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _result(out, tensors, grad_fn)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice x[..., start:start+length, ...] along one axis"""
    axis = axis % x.ndim
    if start < 0 or length < 0 or start + length > x.shape[axis]:
        raise ShapeError("narrow", x.shape, detail=f"axis {axis} slice {start}:{start + length}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = x.data[index]

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _result(out, (x,), grad_fn)


def select(x: Tensor, axis: int, i: int) -> Tensor:
    """x indexed at position i along `axis`, removing that axis"""
    axis = axis % x.ndim
    picked = narrow(x, axis, i, 1)
    return reshape(picked, x.shape[:axis] + x.shape[axis + 1:])


# ---------------------------------------------------------------------------
# Elementwise


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)

    def grad_fn(g):
        return g, g

    return _result(a.data + b.data, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)

    def grad_fn(g):
        return g, -g

    return _result(a.data - b.data, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)

    def grad_fn(g):
        return g * b.data, g * a.data

    return _result(a.data * b.data, (a, b), grad_fn)


def scale(x: Tensor, c: float) -> Tensor:
    factor = x.dtype.type(c)

    def grad_fn(g):
        return (g * factor,)

    return _result(x.data * factor, (x,), grad_fn)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b where b's shape is a suffix of x's shape (the only broadcast allowed)"""
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise ShapeError("add_bias", x.shape, b.shape)
    lead = tuple(range(x.ndim - b.ndim))

    def grad_fn(g):
        return g, g.sum(axis=lead) if lead else g

    return _result(x.data + b.data, (x, b), grad_fn)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to `a`"""
    _same_shape("maximum", a, b)
    take_a = a.data >= b.data
    _kink(take_a)

    def grad_fn(g):
        return np.where(take_a, g, 0), np.where(take_a, 0, g)

    return _result(np.where(take_a, a.data, b.data), (a, b), grad_fn)


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    _kink(positive)

    def grad_fn(g):
        return (np.where(positive, g, 0),)

    return _result(np.where(positive, x.data, 0).astype(x.dtype), (x,), grad_fn)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)"""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = (x.data * cdf).astype(x.dtype)

    def grad_fn(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return ((g * (cdf + x.data * pdf)).astype(x.dtype),)

    return _result(out, (x,), grad_fn)


ACTIVATIONS = {"relu": relu, "gelu": gelu}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind.lower()]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}")
    return fn(x)


# ---------------------------------------------------------------------------
# Reductions and normalisation


def sum_all(x: Tensor) -> Tensor:
    def grad_fn(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), grad_fn)


def mean_axis(x: Tensor, axis: int) -> Tensor:
    axis = axis % x.ndim
    n = x.shape[axis]
    if n == 0:
        raise ShapeError("mean_axis", x.shape, detail=f"empty axis {axis}")

    def grad_fn(g):
        return (np.repeat(np.expand_dims(g, axis), n, axis=axis) / x.dtype.type(n),)

    return _result(x.data.mean(axis=axis), (x,), grad_fn)


def softmax_last_axis(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("softmax_last_axis", x.shape, detail="last axis must be non-empty")
    z = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = z / z.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), grad_fn)


def log_softmax_last_axis(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then gamma * xhat + beta"""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def grad_fn(g):
        dxhat = g * gamma.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gamma, beta), grad_fn)


def pick_last_axis(x: Tensor, index: np.ndarray) -> Tensor:
    """out[i] = x[i, index[i]] for a 2-D x"""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise ShapeError("pick_last_axis", x.shape, index.shape)
    rows = np.arange(x.shape[0])

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[rows, index] = g
        return (full,)

    return _result(x.data[rows, index], (x,), grad_fn)
