"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the handful of primitives needed for MLP classifiers, contrastive
objectives and mutual-information critics are provided. Every primitive records
its inputs so a scalar output can be differentiated with :meth:`Tensor.backward`.
Broadcasting is limited to adding a bias row to a matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "Node",
    "ShapeError",
    "NotScalarError",
    "NonFiniteError",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "tanh",
    "relu",
    "transpose",
    "total",
    "mean",
    "pick",
    "rows",
    "log_softmax",
    "l2_normalize",
    "softmax",
    "log_softmax_np",
    "cross_entropy",
    "kl_div",
    "soft_cross_entropy",
    "teacher_terms",
    "forward_backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible; ``node`` names the failing primitive."""

    def __init__(self, node: str, message: str):
        super().__init__(f"{node}: {message}")
        self.node = node


class NotScalarError(ValueError):
    """Raised when differentiating an output with more than one entry."""


class NonFiniteError(FloatingPointError):
    """A primitive received or produced NaN/inf where only finite values are allowed."""


class Tensor:
    """A float64 array, an optional gradient, and the record of how it was made."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: tuple["Tensor", ...] = (),
        backward: Callable[[np.ndarray], None] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other: float):
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def topological(self) -> list["Tensor"]:
        """Nodes reachable from this tensor, inputs before consumers."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self) -> None:
        if self.data.size != 1:
            raise NotScalarError(f"cannot differentiate output of shape {self.shape}")
        order = self.topological()
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not _needs_grad(t):
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _track(*ts: Tensor) -> bool:
    return any(_needs_grad(t) for t in ts)


def _finite(node: str, *ts: Tensor) -> None:
    for t in ts:
        if not np.isfinite(t.data).all():
            raise NonFiniteError(f"{node}: non-finite input")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"cannot multiply {a.shape} by {b.shape}")
    _finite("matmul", a, b)
    out = Tensor(a.data @ b.data, op="matmul", parents=(a, b))
    if _track(a, b):
        def backward(g):
            _accumulate(a, g @ b.data.T)
            _accumulate(b, a.data.T @ g)
        out._backward = backward
    return out


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector added to every row of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    bias = a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]
    if a.shape != b.shape and not bias:
        raise ShapeError("add", f"cannot add {b.shape} to {a.shape}")
    _finite("add", a, b)
    out = Tensor(a.data + b.data, op="add", parents=(a, b))
    if _track(a, b):
        def backward(g):
            _accumulate(a, g)
            _accumulate(b, g.sum(axis=0) if bias else g)
        out._backward = backward
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("sub", f"cannot subtract {b.shape} from {a.shape}")
    _finite("sub", a, b)
    out = Tensor(a.data - b.data, op="sub", parents=(a, b))
    if _track(a, b):
        def backward(g):
            _accumulate(a, g)
            _accumulate(b, -g)
        out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mul", f"cannot multiply {a.shape} and {b.shape} elementwise")
    _finite("mul", a, b)
    out = Tensor(a.data * b.data, op="mul", parents=(a, b))
    if _track(a, b):
        def backward(g):
            _accumulate(a, g * b.data)
            _accumulate(b, g * a.data)
        out._backward = backward
    return out


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    _finite("scale", a)
    out = Tensor(a.data * c, op="scale", parents=(a,))
    if _track(a):
        out._backward = lambda g: _accumulate(a, g * c)
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    _finite("tanh", a)
    y = np.tanh(a.data)
    out = Tensor(y, op="tanh", parents=(a,))
    if _track(a):
        out._backward = lambda g: _accumulate(a, g * (1.0 - y * y))
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    _finite("relu", a)
    on = a.data > 0
    out = Tensor(np.where(on, a.data, 0.0), op="relu", parents=(a,))
    if _track(a):
        out._backward = lambda g: _accumulate(a, g * on)
    return out


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose", f"expected a matrix, got {a.shape}")
    out = Tensor(a.data.T, op="transpose", parents=(a,))
    if _track(a):
        out._backward = lambda g: _accumulate(a, g.T)
    return out


def total(a) -> Tensor:
    a = as_tensor(a)
    _finite("sum", a)
    out = Tensor(a.data.sum(), op="sum", parents=(a,))
    if _track(a):
        out._backward = lambda g: _accumulate(a, np.broadcast_to(g, a.shape))
    return out


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    if n == 0:
        raise ShapeError("mean", "empty input")
    _finite("mean", a)
    out = Tensor(a.data.mean(), op="mean", parents=(a,))
    if _track(a):
        out._backward = lambda g: _accumulate(a, np.broadcast_to(g / n, a.shape))
    return out


def pick(a, index: Sequence[int]) -> Tensor:
    """Select ``a[i, index[i]]`` for every row ``i``."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError("pick", f"need one index per row of {a.shape}, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise IndexError("pick: index out of range")
    r = np.arange(a.shape[0])
    out = Tensor(a.data[r, idx], op="pick", parents=(a,))
    if _track(a):
        def backward(g):
            full = np.zeros_like(a.data)
            full[r, idx] = g
            _accumulate(a, full)
        out._backward = backward
    return out


def rows(table, index: Sequence[int]) -> Tensor:
    """Gather rows of an embedding table; gradients scatter-add back."""
    table = as_tensor(table)
    idx = np.asarray(index, dtype=np.int64)
    if table.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError("rows", f"cannot gather {idx.shape} from {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError("rows: index out of range")
    out = Tensor(table.data[idx], op="rows", parents=(table,))
    if _track(table):
        def backward(g):
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            _accumulate(table, full)
        out._backward = backward
    return out


def log_softmax_np(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Row-wise log-softmax; ``-inf`` entries get log-probability ``-inf``.

    With a boolean ``mask`` only masked-in entries take part and the rest are 0.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any() or np.isposinf(x).any():
        raise NonFiniteError("log_softmax: NaN or +inf input")
    work = x if mask is None else np.where(mask, x, -np.inf)
    top = work.max(axis=-1, keepdims=True)
    if not np.isfinite(top).all():
        raise NonFiniteError("log_softmax: a row has no finite entry")
    shifted = work - top
    with np.errstate(divide="ignore"):
        out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return out if mask is None else np.where(mask, out, 0.0)


def softmax(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax; entries equal to ``-inf`` receive probability exactly 0."""
    return np.exp(log_softmax_np(x))


def log_softmax(a, mask: np.ndarray | None = None) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("log_softmax", f"expected a matrix, got {a.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape:
            raise ShapeError("log_softmax", f"mask {mask.shape} does not match {a.shape}")
    y = log_softmax_np(a.data, mask)
    out = Tensor(y, op="log_softmax", parents=(a,))
    if _track(a):
        p = np.exp(y) if mask is None else np.where(mask, np.exp(y), 0.0)

        def backward(g):
            gm = g if mask is None else np.where(mask, g, 0.0)
            gin = gm - p * gm.sum(axis=-1, keepdims=True)
            _accumulate(a, gin if mask is None else np.where(mask, gin, 0.0))
        out._backward = backward
    return out


def l2_normalize(a, eps: float = 1e-12) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("l2_normalize", f"expected a matrix, got {a.shape}")
    _finite("l2_normalize", a)
    norm = np.maximum(np.sqrt((a.data * a.data).sum(axis=1, keepdims=True)), eps)
    y = a.data / norm
    out = Tensor(y, op="l2_normalize", parents=(a,))
    if _track(a):
        def backward(g):
            _accumulate(a, (g - y * (y * g).sum(axis=1, keepdims=True)) / norm)
        out._backward = backward
    return out


def cross_entropy(logits, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-wise softmax."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],) or labels.size == 0:
        raise ShapeError("cross_entropy", f"{labels.shape} labels for logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError(f"cross_entropy: labels must lie in [0, {logits.shape[1]})")
    _finite("cross_entropy", logits)
    return scale(mean(pick(log_softmax(logits), labels)), -1.0)


def soft_cross_entropy(target_probs, logits) -> Tensor:
    """Batch mean of ``-sum_c p_c log softmax(logits)_c`` for constant targets ``p``."""
    p = np.asarray(target_probs, dtype=np.float64)
    logits = as_tensor(logits)
    if p.shape != logits.shape or p.ndim != 2:
        raise ShapeError("soft_cross_entropy", f"targets {p.shape} vs logits {logits.shape}")
    _finite("soft_cross_entropy", logits)
    return scale(total(mul(log_softmax(logits), Tensor(p))), -1.0 / p.shape[0])


def teacher_terms(teacher_logits) -> tuple[np.ndarray, np.ndarray]:
    """Teacher probabilities and per-row ``sum_c p_c log p_c`` (with ``0 log 0 = 0``)."""
    teacher = np.asarray(teacher_logits, dtype=np.float64)
    if teacher.ndim != 2:
        raise ShapeError("kl_div", f"teacher must be a matrix, got {teacher.shape}")
    if (~np.isfinite(teacher)).all(axis=1).any():
        raise ValueError("kl_div: a teacher row has no finite logit")
    log_p = log_softmax_np(teacher)
    p = np.exp(log_p)
    neg_entropy = np.where(p > 0, p * np.where(p > 0, log_p, 0.0), 0.0).sum(axis=1)
    return p, neg_entropy


def kl_div(teacher_logits, student_logits) -> Tensor:
    """Batch mean of KL(softmax(teacher) || softmax(student)).

    The teacher is a constant. Its ``-inf`` logits carry zero probability and
    their ``0 log 0`` terms vanish.
    """
    teacher = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(
        teacher_logits, dtype=np.float64)
    student = as_tensor(student_logits)
    if teacher.shape != student.shape or teacher.ndim != 2:
        raise ShapeError("kl_div", f"teacher {teacher.shape} vs student {student.shape}")
    p, neg_entropy = teacher_terms(teacher)
    return add(Tensor(neg_entropy.mean()), soft_cross_entropy(p, student))


@dataclass(frozen=True)
class Node:
    """One recorded primitive: its position, kind, input positions and output shape."""

    id: int
    op: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]


@dataclass(frozen=True)
class Graph:
    """A computation over named input tensors.

    ``fn`` receives a mapping of name to :class:`Tensor` and returns either a
    single tensor (named ``target``) or a mapping of named outputs that contains
    ``target``. ``target`` is the scalar that gets differentiated.
    """

    fn: Callable[[Mapping[str, Tensor]], Tensor | Mapping[str, Tensor]]
    target: str = "loss"

    def run(self, bound: Mapping[str, Tensor]) -> dict[str, Tensor]:
        result = self.fn(bound)
        if isinstance(result, Tensor):
            return {self.target: result}
        outputs = dict(result)
        if self.target not in outputs:
            raise KeyError(f"graph did not produce target output {self.target!r}")
        return outputs

    def nodes(self, inputs: Mapping[str, np.ndarray]) -> list[Node]:
        """Trace the graph and return its primitives in topological order."""
        bound = {k: Tensor(v) for k, v in inputs.items()}
        order = self.run(bound)[self.target].topological()
        pos = {id(t): i for i, t in enumerate(order)}
        return [Node(i, t.op, tuple(pos[id(p)] for p in t.parents), t.shape)
                for i, t in enumerate(order)]


def forward_backward(
    graph: Graph,
    inputs: Mapping[str, np.ndarray],
    wrt: Sequence[str] | None = None,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Evaluate ``graph`` and differentiate its target with respect to ``wrt``.

    ``wrt`` defaults to every input. Inputs the target does not depend on get a
    zero gradient.
    """
    names = list(inputs) if wrt is None else list(wrt)
    missing = [n for n in names if n not in inputs]
    if missing:
        raise KeyError(f"unbound inputs: {missing}")
    bound = {k: Tensor(v, requires_grad=k in names) for k, v in inputs.items()}
    outputs = graph.run(bound)
    target = outputs[graph.target]
    if target.size != 1:
        raise NotScalarError(f"target {graph.target!r} has shape {target.shape}")
    target.backward()
    grads = {}
    for n in names:
        g = bound[n].grad
        grads[n] = np.zeros_like(bound[n].data) if g is None else np.array(g)
    return {k: v.data.copy() for k, v in outputs.items()}, grads


def grad_check(
    graph: Graph,
    point: Mapping[str, np.ndarray],
    step: float = 1e-5,
    wrt: Sequence[str] | None = None,
) -> float:
    """Largest ``|analytic - central difference| / max(1, |analytic|)`` over all entries."""
    if step <= 0:
        raise ValueError("step must be positive")
    point = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    _, grads = forward_backward(graph, point, wrt)

    def value(p):
        out = graph.run({k: Tensor(v) for k, v in p.items()})[graph.target].data
        if out.size != 1:
            raise NotScalarError(f"target {graph.target!r} has shape {out.shape}")
        v = float(out.reshape(-1)[0])
        if not math.isfinite(v):
            raise NonFiniteError("non-finite loss at a perturbed point")
        return v

    worst = 0.0
    for name, analytic in grads.items():
        base = point[name]
        flat = base.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = value(point)
            flat[i] = keep - step
            down = value(point)
            flat[i] = keep
            numeric = (up - down) / (2.0 * step)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
