"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` carrying a :class:`Node` that records its inputs and
a closure mapping the output gradient to input gradients. :func:`backward` walks the recorded graph in a
deterministic reverse topological order, so repeated evaluations produce bit-identical gradients.

Broadcasting is deliberately narrow: equal shapes, scalar against tensor, and a trailing-suffix operand
(e.g. a bias row against a batch) are accepted; anything else is a :class:`~cvrscale.errors.DimensionError`.

"""

from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from cvrscale.errors import ContractError, DimensionError, NumericError
from cvrscale.utils import SplitMix64, fnv1a64

Number = Union[int, float]
TensorLike = Union["Tensor", np.ndarray, Number, Sequence]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

#: ops accepted by :func:`elementwise`
ELEMENTWISE_OPS = ("add", "mul", "relu", "log1p")
LAYER_NORM_EPS = 1e-5


class Node:
    """Operation record: op name, input tensors and the gradient closure."""

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: Tuple["Tensor", ...], backward_fn: BackwardFn) -> None:
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn

    def __repr__(self) -> str:
        return f"Node({self.op}, inputs={[t.shape for t in self.inputs]})"


class Tensor:
    """Row-major float64 array with an optional gradient.

    Args:
        data: anything ``numpy.asarray`` accepts
        requires_grad: whether gradients are collected for this tensor
        name: optional label used in error messages and checkpoints

    Example:
        >>> x = Tensor([[1.0, 2.0]], requires_grad=True)
        >>> loss = (x * x).sum()
        >>> backward(loss)
        >>> x.grad.tolist()
        [[2.0, 4.0]]

    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data: TensorLike, requires_grad: bool = False, name: Optional[str] = None) -> None:
        arr = np.asarray(data, dtype=np.float64)
        if any(extent < 1 for extent in arr.shape):
            raise DimensionError(f"Tensor extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        """Copy of the underlying values."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        """Same values, no graph history and no gradient tracking."""
        return Tensor(self.data, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # operator sugar, all routed through the differentiable functions below
    def __add__(self, other: TensorLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: TensorLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: TensorLike) -> "Tensor":
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other: TensorLike) -> "Tensor":
        return add(other, neg(self))

    def __mul__(self, other: TensorLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: TensorLike) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return reduce_sum(self, axis)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return reduce_mean(self, axis)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def _as_tensor(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, op: str, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward_fn)
    return out


def custom_op(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Record a fused operation computed outside this module.

    ``backward_fn`` maps the output gradient to one gradient (or ``None``) per input, in input order.
    """
    return _result(np.asarray(data, dtype=np.float64), op, tuple(inputs), backward_fn)


def _broadcast_shape(op: str, a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    if a == b:
        return a
    if len(a) == 0 or a == (1,):
        return b
    if len(b) == 0 or b == (1,):
        return a
    longer, shorter = (a, b) if len(a) >= len(b) else (b, a)
    if longer[len(longer) - len(shorter) :] == shorter:
        return longer
    raise DimensionError(f"Failed `{op}`, shapes are not broadcast-compatible: {a} vs {b}")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0 or shape == (1,):
        return np.asarray(grad.sum()).reshape(shape)
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    keep = tuple(i for i, extent in enumerate(shape) if extent == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


def add(a: TensorLike, b: TensorLike) -> Tensor:
    """Pointwise sum."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)

    def _backward(g: np.ndarray) -> Sequence[np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, "add", (a, b), _backward)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    """Pointwise (Hadamard) product."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)

    def _backward(g: np.ndarray) -> Sequence[np.ndarray]:
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, "mul", (a, b), _backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def relu(a: TensorLike) -> Tensor:
    """Rectifier; the subgradient at zero is zero."""
    a = _as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def log1p(a: TensorLike) -> Tensor:
    """``log(1 + x)`` for ``x > -1``."""
    a = _as_tensor(a)
    if np.any(a.data <= -1.0):
        raise NumericError("Failed `log1p`, inputs must be greater than -1")
    return _result(np.log1p(a.data), "log1p", (a,), lambda g: (g / (1.0 + a.data),))


_ELEMENTWISE: Dict[str, Callable[..., Tensor]] = {"add": add, "mul": mul, "relu": relu, "log1p": log1p}


def elementwise(op: str, *inputs: TensorLike) -> Tensor:
    """Dispatch one of :data:`ELEMENTWISE_OPS` by name.

    Example:
        >>> elementwise("relu", [-1.0, 0.0, 2.0]).data.tolist()
        [0.0, 0.0, 2.0]

    """
    if op not in _ELEMENTWISE:
        raise ContractError(f"Unknown elementwise op `{op}`, expected one of {ELEMENTWISE_OPS}")
    return _ELEMENTWISE[op](*inputs)


def _swap_last(arr: np.ndarray) -> np.ndarray:
    return np.swapaxes(arr, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading (batch) axes broadcast as in numpy.

    Example:
        >>> matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]])).data.tolist()
        [[17.0], [39.0]]

    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"Failed `matmul`, inner extents differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as ex:
        raise DimensionError(f"Failed `matmul`, batch extents differ: {a.shape} x {b.shape}") from ex

    def _backward(g: np.ndarray) -> Sequence[np.ndarray]:
        ga = _unbroadcast(np.matmul(g, _swap_last(b.data)), a.shape)
        gb = _unbroadcast(np.matmul(_swap_last(a.data), g), b.shape)
        return ga, gb

    return _result(out, "matmul", (a, b), _backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, max-subtracted for stability.

    Example:
        >>> softmax_rows(Tensor([[0.0, 0.0]])).data.tolist()
        [[0.5, 0.5]]

    """
    x = _as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("Failed `softmax_rows`, input contains NaN")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    expd = np.exp(shifted)
    y = expd / expd.sum(axis=-1, keepdims=True)

    def _backward(g: np.ndarray) -> Sequence[np.ndarray]:
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, "softmax", (x,), _backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then scale and shift."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"Failed `layer_norm`, gain/bias {gain.shape}/{bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    xhat = (x.data - mu) * inv_std
    lead = tuple(range(x.ndim - 1))

    def _backward(g: np.ndarray) -> Sequence[np.ndarray]:
        dxhat = g * gain.data
        dx = inv_std * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gain.data + bias.data, "layer_norm", (x, gain, bias), _backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as ex:
        raise DimensionError(f"Failed `reshape`, cannot view {x.shape} as {shape}") from ex
    return _result(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), "transpose", (x,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis``."""
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ContractError("Failed `concat`, no tensors given")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as ex:
        raise DimensionError(f"Failed `concat`, shapes {[t.shape for t in tensors]} on axis {axis}") from ex
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g: np.ndarray) -> Sequence[np.ndarray]:
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, "concat", tensors, _backward)


def take(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate in the backward pass."""
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim

    def _backward(g: np.ndarray) -> Sequence[np.ndarray]:
        grad = np.zeros_like(x.data)
        moved = np.moveaxis(grad, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (grad,)

    return _result(np.take(x.data, indices, axis=axis), "take", (x,), _backward)


def reduce_sum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:

        def _backward_all(g: np.ndarray) -> Sequence[np.ndarray]:
            return (np.broadcast_to(g, x.shape).copy(),)

        return _result(np.asarray(x.data.sum()), "sum", (x,), _backward_all)

    def _backward(g: np.ndarray) -> Sequence[np.ndarray]:
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result(x.data.sum(axis=axis), "sum", (x,), _backward)


def reduce_mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return mul(reduce_sum(x, axis), 1.0 / count)


def embedding_bag(table: Tensor, rows: np.ndarray, indices: np.ndarray, weights: np.ndarray, n_rows: int) -> Tensor:
    """Weighted sums of table rows: ``out[rows[j]] += weights[j] * table[indices[j]]``.

    Rows of the output with no entries stay zero, which is how empty bags map to the zero vector.
    """
    rows = np.asarray(rows, dtype=np.int64)
    indices = np.asarray(indices, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise DimensionError(f"Failed `embedding_bag`, index outside table of {table.shape[0]} rows")
    out = np.zeros((n_rows, table.shape[1]))
    np.add.at(out, rows, weights[:, None] * table.data[indices])

    def _backward(g: np.ndarray) -> Sequence[np.ndarray]:
        grad = np.zeros_like(table.data)
        np.add.at(grad, indices, weights[:, None] * g[rows])
        return (grad,)

    return _result(out, "embedding_bag", (table,), _backward)


class ComputeGraph:
    """Operation records reachable from an output tensor, in topological order (inputs first)."""

    def __init__(self, order: List[Tensor]) -> None:
        self.order = order

    @classmethod
    def from_output(cls, output: Tensor) -> "ComputeGraph":
        order: List[Tensor] = []
        visited = set()
        # iterative post-order DFS; inputs are expanded in their recorded order
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            if tensor.node is not None:
                for inp in reversed(tensor.node.inputs):
                    if inp.requires_grad and id(inp) not in visited:
                        stack.append((inp, False))
        return cls(order)

    @property
    def nodes(self) -> List[Node]:
        return [t.node for t in self.order if t.node is not None]

    def __len__(self) -> int:
        return len(self.order)


def backward(loss: Tensor) -> None:
    """Fill ``grad`` of every gradient-tracking tensor reachable from a scalar ``loss``.

    Leaf gradients accumulate across calls (call :meth:`Tensor.zero_grad` between steps); fan-out contributions
    are summed in reverse topological order.
    """
    if loss.size != 1:
        raise ContractError(f"Failed `backward`, loss must be a scalar but has shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = ComputeGraph.from_output(loss)
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for tensor in reversed(graph.order):
        grad = pending.pop(id(tensor), None)
        if grad is None:
            continue
        if tensor.node is None:
            tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
            continue
        tensor.grad = grad
        for inp, inp_grad in zip(tensor.node.inputs, tensor.node.backward_fn(grad)):
            if inp_grad is None or not inp.requires_grad:
                continue
            key = id(inp)
            pending[key] = inp_grad if key not in pending else pending[key] + inp_grad


class ParamFactory:
    """Deterministic parameter initialization keyed by parameter name.

    Each parameter draws from its own generator stream forked from ``(seed, fnv1a64(name))``, so adding or
    removing a parameter never changes the initial values of the others.
    """

    def __init__(self, seed: int) -> None:
        self.seed = int(seed)

    def _rng(self, name: str) -> "SplitMix64":
        return SplitMix64(self.seed).fork(fnv1a64(name.encode("utf-8")))

    def glorot(self, name: str, shape: Tuple[int, ...]) -> Tensor:
        """Glorot-uniform over the last two extents (fan-in, fan-out)."""
        fan_in, fan_out = shape[-2], shape[-1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        values = (self._rng(name).uniform(int(np.prod(shape))) * 2.0 - 1.0) * bound
        return Tensor(values.reshape(shape), requires_grad=True, name=name)

    def uniform(self, name: str, shape: Tuple[int, ...], bound: float) -> Tensor:
        values = (self._rng(name).uniform(int(np.prod(shape))) * 2.0 - 1.0) * bound
        return Tensor(values.reshape(shape), requires_grad=True, name=name)

    def zeros(self, name: str, shape: Tuple[int, ...]) -> Tensor:
        return Tensor(np.zeros(shape), requires_grad=True, name=name)

    def ones(self, name: str, shape: Tuple[int, ...]) -> Tensor:
        return Tensor(np.ones(shape), requires_grad=True, name=name)
