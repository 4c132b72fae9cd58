"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation returns a new DenseArray that remembers its parents and a
vector-Jacobian product. The graph is rebuilt on every forward pass
(define-by-run); `backward` walks it once in reverse topological order and
accumulates gradients into the ParamNodes it reaches.
"""
from contextlib import contextmanager
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from errors import ContractError, DimensionError, DomainError, LabelIndexError

_recording = [True]


@contextmanager
def no_grad():
    """Evaluate without recording the computation graph."""
    previous = _recording[0]
    _recording[0] = False
    try:
        yield
    finally:
        _recording[0] = previous


class DenseArray:
    """A row-major float64 array that can take part in the computation graph."""

    def __init__(self, values, parents: Tuple["DenseArray", ...] = (), op: str = "",
                 vjp: Optional[Callable] = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.parents = parents
        self.op = op
        self.vjp = vjp
        self.requires_grad = bool(parents)

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def __repr__(self):
        return f"DenseArray(shape={self.shape}, op={self.op or 'leaf'})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class ParamNode(DenseArray):
    """Trainable leaf: a value, an accumulated gradient and a stable identifier."""

    def __init__(self, values, name: str):
        super().__init__(values)
        self.name = name
        self.requires_grad = True
        self.gradient = np.zeros_like(self.values)

    @property
    def value(self) -> np.ndarray:
        return self.values

    def zero_grad(self):
        self.gradient = np.zeros_like(self.values)

    def __repr__(self):
        return f"ParamNode({self.name}, shape={self.shape})"


class Graph:
    """Topologically ordered records reachable from a root, plus the leaf set."""

    def __init__(self, records: List[DenseArray], leaves: List[ParamNode]):
        self.records = records
        self.leaves = leaves

    @classmethod
    def trace(cls, root: DenseArray) -> "Graph":
        records, leaves = [], []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                records.append(node)
                if isinstance(node, ParamNode):
                    leaves.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(records, leaves)


def as_array(x) -> DenseArray:
    if isinstance(x, DenseArray):
        return x
    return DenseArray(x)


def _node(values, parents: Sequence[DenseArray], op: str, vjp: Callable) -> DenseArray:
    tracked = tuple(parents) if _recording[0] and any(p.requires_grad for p in parents) else ()
    return DenseArray(values, tracked, op, vjp if tracked else None)


def _is_scalar(a: DenseArray) -> bool:
    return a.values.size == 1


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(np.sum(grad)).reshape(shape)


def _check_binary(op: str, a: DenseArray, b: DenseArray):
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    raise DimensionError(f"{op}: operands must share a shape or be scalar, got {a.shape} and {b.shape}")


# ===== Linear algebra =====

def matmul(a, b) -> DenseArray:
    """Matrix product of two 2-D arrays."""
    a, b = as_array(a), as_array(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values

    def vjp(g):
        return g @ bv.T, av.T @ g
    return _node(av @ bv, (a, b), "matmul", vjp)


def transpose(a) -> DenseArray:
    a = as_array(a)
    if a.values.ndim != 2:
        raise DimensionError(f"transpose: expected a 2-D array, got {a.shape}")
    return _node(a.values.T, (a,), "transpose", lambda g: (g.T,))


def reshape(a, shape) -> DenseArray:
    a = as_array(a)
    original = a.shape
    try:
        out = a.values.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {original} as {tuple(shape)}") from e
    return _node(out, (a,), "reshape", lambda g: (g.reshape(original),))


def broadcast_rows(row, count: int) -> DenseArray:
    """Repeat a 1-D row `count` times into a (count, k) array."""
    row = as_array(row)
    if row.values.ndim != 1:
        raise DimensionError(f"broadcast_rows: expected a 1-D row, got {row.shape}")
    out = np.broadcast_to(row.values, (count, row.shape[0])).copy()
    return _node(out, (row,), "broadcast_rows", lambda g: (g.sum(axis=0),))


# ===== Elementwise =====

def add(a, b) -> DenseArray:
    a, b = as_array(a), as_array(b)
    _check_binary("add", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.values + b.values, (a, b), "add",
                 lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> DenseArray:
    a, b = as_array(a), as_array(b)
    _check_binary("sub", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.values - b.values, (a, b), "sub",
                 lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b) -> DenseArray:
    a, b = as_array(a), as_array(b)
    _check_binary("mul", a, b)
    av, bv = a.values, b.values
    return _node(av * bv, (a, b), "mul",
                 lambda g: (_reduce_to(g * bv, av.shape), _reduce_to(g * av, bv.shape)))


def neg(a) -> DenseArray:
    a = as_array(a)
    return _node(-a.values, (a,), "neg", lambda g: (-g,))


def tanh(a) -> DenseArray:
    a = as_array(a)
    out = np.tanh(a.values)
    return _node(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def exp(a) -> DenseArray:
    a = as_array(a)
    out = np.exp(a.values)
    return _node(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> DenseArray:
    a = as_array(a)
    if np.any(a.values <= 0):
        raise DomainError(f"log: non-positive value {a.values.min()!r}")
    av = a.values
    return _node(np.log(av), (a,), "log", lambda g: (g / av,))


def square(a) -> DenseArray:
    a = as_array(a)
    av = a.values
    return _node(av * av, (a,), "square", lambda g: (2.0 * av * g,))


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "neg": neg,
}


def elementwise(op: str, *operands) -> DenseArray:
    """Dispatch one of add, mul, tanh, exp, log, neg by name."""
    if op not in _ELEMENTWISE:
        raise ContractError(f"elementwise: unknown op {op!r}")
    return _ELEMENTWISE[op](*operands)


# ===== Reductions =====

def sum(a, axis: Optional[int] = None) -> DenseArray:
    a = as_array(a)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)
    return _node(np.sum(a.values, axis=axis), (a,), "sum", vjp)


def mean(a, axis: Optional[int] = None) -> DenseArray:
    a = as_array(a)
    count = a.values.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / count)


def softmax_cross_entropy(logits, labels) -> DenseArray:
    """Mean of -log softmax(logits)[label] over the batch.

    Accepts a single (P,) logit vector with an integer label or a (B, P)
    batch with B labels.
    """
    logits = as_array(logits)
    single = logits.values.ndim == 1
    lv = logits.values.reshape(1, -1) if single else logits.values
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if lv.ndim != 2 or lv.shape[0] != labels.shape[0]:
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape} do not match {labels.shape[0]} labels")
    batch, classes = lv.shape
    if classes < 2:
        raise ContractError(f"softmax_cross_entropy: need at least 2 classes, got {classes}")
    if labels.min() < 0 or labels.max() >= classes:
        raise LabelIndexError(f"softmax_cross_entropy: labels must lie in [0, {classes}), got {labels.min()}..{labels.max()}")

    shifted = lv - lv.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    totals = exps.sum(axis=1)
    rows = np.arange(batch)
    losses = np.log(totals) - shifted[rows, labels]
    probs = exps / totals[:, None]

    def vjp(g):
        grad = probs.copy()
        grad[rows, labels] -= 1.0
        grad *= g / batch
        return (grad.reshape(logits.shape),)
    return _node(np.mean(losses), (logits,), "softmax_cross_entropy", vjp)


# ===== Backward =====

def backward(root: DenseArray):
    """Accumulate d(root)/d(param) into every reachable ParamNode.gradient."""
    if root.values.size != 1:
        raise ContractError(f"backward: root must be a scalar, got shape {root.shape}")
    graph = Graph.trace(root)
    grads = {id(root): np.ones_like(root.values)}
    for node in reversed(graph.records):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, ParamNode):
            node.gradient = node.gradient + g
        if node.vjp is None:
            continue
        for parent, parent_grad in zip(node.parents, node.vjp(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad


def zero_grad(params: Iterable[ParamNode]):
    for param in params:
        param.zero_grad()


def numeric_gradient(fn: Callable[[], float], param: ParamNode, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. one parameter."""
    grad = np.zeros_like(param.values)
    flat = param.values.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        upper = fn()
        flat[i] = original - eps
        lower = fn()
        flat[i] = original
        out[i] = (upper - lower) / (2.0 * eps)
    return grad


# ===== Layers and optimizer =====

class Dense:
    """Fully-connected layer x @ W + b."""

    def __init__(self, in_features: int, out_features: int, name: str,
                 rng: Optional[np.random.Generator] = None, zero: bool = False):
        if zero or rng is None:
            weight = np.zeros((in_features, out_features))
        else:
            bound = 1.0 / np.sqrt(in_features)
            weight = rng.uniform(-bound, bound, size=(in_features, out_features))
        self.weight = ParamNode(weight, f"{name}.weight")
        self.bias = ParamNode(np.zeros(out_features), f"{name}.bias")

    def __call__(self, x: DenseArray) -> DenseArray:
        x = as_array(x)
        return add(matmul(x, self.weight), broadcast_rows(self.bias, x.shape[0]))

    def parameters(self) -> List[ParamNode]:
        return [self.weight, self.bias]


class Adam:
    """Adam optimizer over a list of ParamNodes."""

    def __init__(self, params: Sequence[ParamNode], lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.steps = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def zero_grad(self):
        zero_grad(self.params)

    def step(self):
        self.steps += 1
        correction1 = 1.0 - self.beta1 ** self.steps
        correction2 = 1.0 - self.beta2 ** self.steps
        for param, m, v in zip(self.params, self.m, self.v):
            g = param.gradient
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            param.values -= update
