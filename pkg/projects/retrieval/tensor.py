"""
Reverse-mode autodiff over dense float64 numpy arrays.

Every op returns a new Tensor holding its parents and a `_backward(g)` closure
that pushes the upstream gradient `g` into the parents. `Graph` orders the
nodes so each closure runs once, after every consumer of its output.
"""

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from errors import ConfigError, ContractError, DimensionError, NumericalError

_debug = False


def set_debug(flag: bool) -> None:
    """In debug mode every new Tensor is checked for NaN/Inf."""
    global _debug
    _debug = flag


class Tensor:
    def __init__(self, data, requires_grad: bool = False,
                 _prev: tuple["Tensor", ...] = (), _op: str = ""):
        if isinstance(data, np.ndarray) and data.dtype == np.float64 and _prev:
            self.data = data
        else:
            self.data = np.array(data, dtype=np.float64)
        if _debug and not np.all(np.isfinite(self.data)):
            raise NumericalError(f"non-finite value produced by '{_op or 'leaf'}'")
        self.requires_grad = requires_grad or any(p.requires_grad for p in _prev)
        self.grad: np.ndarray | None = None
        self._prev = _prev
        self._op = _op
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other): return elementwise("add", self, other)
    def __radd__(self, other): return elementwise("add", other, self)
    def __sub__(self, other): return elementwise("sub", self, other)
    def __rsub__(self, other): return elementwise("sub", other, self)
    def __mul__(self, other): return elementwise("mul", self, other)
    def __rmul__(self, other): return elementwise("mul", other, self)
    def __truediv__(self, other): return elementwise("div", self, other)
    def __neg__(self): return elementwise("neg", self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, key): return getitem(self, key)

    def tanh(self) -> "Tensor": return elementwise("tanh", self)
    def sigmoid(self) -> "Tensor": return elementwise("sigmoid", self)
    def relu(self) -> "Tensor": return elementwise("relu", self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def sum(self, axis: int | None = None) -> "Tensor":
        return reduce_sum(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return reduce_mean(self, axis)

    def max(self, axis: int) -> "Tensor":
        return reduce_max(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], op: str,
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data, _prev=parents, _op=op)
    if out.requires_grad:
        out._backward = backward_fn
    return out


@dataclass
class Graph:
    """Nodes in topological order: every node appears after all of its inputs."""
    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        order: list[Tensor] = []
        visited: set[int] = set()
        # iterative post-order, GRU graphs over long sequences exceed the recursion limit
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss._accumulate(np.ones_like(loss.data))
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    (graph or Graph.from_output(loss)).backward(loss)


# ============================================================
# Elementwise
# ============================================================

def _unbroadcast(g: np.ndarray, like: Tensor) -> np.ndarray:
    return np.sum(g).reshape(like.shape) if like.ndim == 0 and g.ndim > 0 else g


def _binary(op: str, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    x, y = a.data, b.data
    if op == "add":
        out = x + y
        grads = lambda g: (g, g)
    elif op == "sub":
        out = x - y
        grads = lambda g: (g, -g)
    elif op == "mul":
        out = x * y
        grads = lambda g: (g * y, g * x)
    else:
        out = x / y
        grads = lambda g: (g / y, -g * x / (y * y))

    def _backward(g: np.ndarray) -> None:
        ga, gb = grads(g)
        a._accumulate(_unbroadcast(ga, a))
        b._accumulate(_unbroadcast(gb, b))

    return _node(out, (a, b), op, _backward)


def _unary(op: str, a: Tensor) -> Tensor:
    x = a.data
    if op == "neg":
        out = -x
        local = lambda g: -g
    elif op == "identity":
        out = x.copy()
        local = lambda g: g
    elif op == "tanh":
        out = np.tanh(x)
        local = lambda g: g * (1.0 - out * out)
    elif op == "sigmoid":
        out = 0.5 * (1.0 + np.tanh(0.5 * x))
        local = lambda g: g * out * (1.0 - out)
    else:
        out = np.maximum(x, 0.0)
        # derivative at exactly 0 is taken as 0
        local = lambda g: g * (x > 0.0)

    return _node(out, (a,), op, lambda g: a._accumulate(local(g)))


BINARY_OPS = {"add", "sub", "mul", "div"}
UNARY_OPS = {"neg", "identity", "tanh", "sigmoid", "relu"}


def elementwise(op_name: str, *args) -> Tensor:
    tensors = [as_tensor(a) for a in args]
    if op_name in BINARY_OPS:
        if len(tensors) != 2:
            raise ContractError(f"{op_name} takes two operands")
        return _binary(op_name, *tensors)
    if op_name in UNARY_OPS:
        if len(tensors) != 1:
            raise ContractError(f"{op_name} takes one operand")
        return _unary(op_name, tensors[0])
    raise ConfigError(f"unknown elementwise op '{op_name}'")


def activation(name: str, x: Tensor) -> Tensor:
    if name not in ("relu", "tanh", "identity", "sigmoid"):
        raise ConfigError(f"unknown activation '{name}'")
    return elementwise(name, x)


# ============================================================
# Linear algebra + shape ops
# ============================================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def _backward(g: np.ndarray) -> None:
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), "matmul", _backward)


def transpose(a: Tensor) -> Tensor:
    return _node(a.data.T, (a,), "transpose", lambda g: a._accumulate(g.T))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    return _node(out, (a,), "reshape", lambda g: a._accumulate(g.reshape(a.shape)))


def getitem(a: Tensor, key) -> Tensor:
    def _backward(g: np.ndarray) -> None:
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        a._accumulate(full)

    return _node(np.array(a.data[key], dtype=np.float64), (a,), "getitem", _backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g: np.ndarray) -> None:
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            t._accumulate(piece)

    return _node(out, tensors, "concat", _backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if len({t.shape for t in tensors}) != 1:
        raise DimensionError("stack: all tensors must share a shape")
    out = np.stack([t.data for t in tensors], axis=axis)

    def _backward(g: np.ndarray) -> None:
        for i, t in enumerate(tensors):
            t._accumulate(np.take(g, i, axis=axis))

    return _node(out, tensors, "stack", _backward)


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Rows of a 2-D tensor by index; indices outside [0, rows) read as zero rows."""
    index = np.asarray(index, dtype=np.int64)
    valid = (index >= 0) & (index < a.shape[0])
    out = np.zeros((index.size, a.shape[1]))
    out[valid] = a.data[index[valid]]

    def _backward(g: np.ndarray) -> None:
        full = np.zeros_like(a.data)
        np.add.at(full, index[valid], g[valid])
        a._accumulate(full)

    return _node(out, (a,), "take_rows", _backward)


def expand_rows(v: Tensor, n: int) -> Tensor:
    """Repeat a 1-D tensor into n identical rows."""
    if v.ndim != 1:
        raise DimensionError(f"expand_rows needs a vector, got {v.shape}")
    out = np.broadcast_to(v.data, (n, v.shape[0])).copy()
    return _node(out, (v,), "expand_rows", lambda g: v._accumulate(g.sum(axis=0)))


# ============================================================
# Reductions
# ============================================================

def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    out = np.sum(a.data, axis=axis)

    def _backward(g: np.ndarray) -> None:
        g = g if axis is None else np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _node(np.asarray(out, dtype=np.float64), (a,), "sum", _backward)


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return reduce_sum(a, axis) / float(n)


def reduce_max(a: Tensor, axis: int) -> Tensor:
    # argmax returns the first occurrence, so ties route the gradient to the lowest index
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def _backward(g: np.ndarray) -> None:
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        a._accumulate(full)

    return _node(out, (a,), "max", _backward)


# ============================================================
# Fused ops with analytic gradients
# ============================================================

def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows needs a matrix, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def _backward(g: np.ndarray) -> None:
        x._accumulate(y * (g - np.sum(g * y, axis=1, keepdims=True)))

    return _node(y, (x,), "softmax", _backward)


def _normalize_backward(g: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray, axis: int) -> np.ndarray:
    n = xhat.shape[axis]
    return inv_std / n * (n * g - g.sum(axis=axis, keepdims=True)
                          - xhat * np.sum(g * xhat, axis=axis, keepdims=True))


def layer_norm_rows(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.data.var(axis=1, keepdims=True) + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gamma.data + beta.data

    def _backward(g: np.ndarray) -> None:
        gamma._accumulate(np.sum(g * xhat, axis=0))
        beta._accumulate(np.sum(g, axis=0))
        x._accumulate(_normalize_backward(g * gamma.data, xhat, inv_std, axis=1))

    return _node(out, (x, gamma, beta), "layer_norm", _backward)


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, width: int) -> "BatchNormState":
        return cls(np.zeros(width), np.ones(width))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               mode: str = "train") -> Tensor:
    if x.ndim != 2 or x.shape[1] != state.running_mean.shape[0]:
        raise DimensionError(f"batch_norm: input {x.shape} vs width {state.running_mean.shape[0]}")
    if mode == "train":
        b = x.shape[0]
        if b < 2:
            raise ContractError(f"batch_norm in train mode needs at least 2 rows, got {b}")
        mu = x.data.mean(axis=0, keepdims=True)
        var = x.data.var(axis=0, keepdims=True)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu[0]
        state.running_var = (1 - m) * state.running_var + m * var[0] * b / (b - 1)
    elif mode == "infer":
        mu = state.running_mean[None, :]
        var = state.running_var[None, :]
    else:
        raise ConfigError(f"unknown batch_norm mode '{mode}'")
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gamma.data + beta.data

    def _backward(g: np.ndarray) -> None:
        gamma._accumulate(np.sum(g * xhat, axis=0))
        beta._accumulate(np.sum(g, axis=0))
        gx = g * gamma.data
        if mode == "train":
            x._accumulate(_normalize_backward(gx, xhat, inv_std, axis=0))
        else:
            x._accumulate(gx * inv_std)

    return _node(out, (x, gamma, beta), "batch_norm", _backward)


def normalize_rows(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """Scale each row to unit L2 norm. Zero rows stay zero (and pass no gradient);
    the boolean mask of those rows is returned alongside."""
    norms = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True))
    zero = norms[:, 0] == 0.0
    safe = np.where(norms == 0.0, 1.0, norms)
    y = x.data / safe
    y[zero] = 0.0

    def _backward(g: np.ndarray) -> None:
        gx = (g - y * np.sum(g * y, axis=1, keepdims=True)) / safe
        gx[zero] = 0.0
        x._accumulate(gx)

    return _node(y, (x,), "normalize_rows", _backward), zero


# ============================================================
# Gradient checking
# ============================================================

_PROJECTION_STREAM = 0x9E37


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-3,
               seed: int = 0) -> float:
    """Worst |a-b| / max(1e-8, |a|+|b|) between reverse-mode and central-difference
    gradients over every coordinate of every input.

    Non-scalar outputs are reduced with a fixed random projection drawn from its own
    stream, so callers may seed their inputs with the same `seed`. The numeric side
    combines central differences at `step` and `step / 2` (Richardson), which cancels
    the h^2 truncation term. `f` must be smooth within `step` of the inputs.
    """
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None

    out = f(*inputs)
    proj = np.random.default_rng([seed, _PROJECTION_STREAM]).standard_normal(out.shape)
    loss = reduce_sum(out * Tensor(proj))
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def value() -> float:
        return float(np.sum(f(*inputs).data * proj))

    def central(flat: np.ndarray, i: int, h: float) -> float:
        orig = flat[i]
        flat[i] = orig + h
        plus = value()
        flat[i] = orig - h
        minus = value()
        flat[i] = orig
        return (plus - minus) / (2 * h)

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        a = a.reshape(-1)
        for i in range(flat.size):
            num = (4.0 * central(flat, i, step / 2) - central(flat, i, step)) / 3.0
            worst = max(worst, abs(a[i] - num) / max(1e-8, abs(a[i]) + abs(num)))
    for t in inputs:
        t.grad = None
    return worst
