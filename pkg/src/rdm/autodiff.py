"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations are recorded on the active :class:`Tape` whenever one of their
inputs tracks gradients.  The tape is an append-only list, so creation order
is already a topological order and :meth:`Tape.backward` is a single reverse
sweep.  Nothing is recorded outside a ``with Tape():`` block.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> tape.backward(loss)[w.id].tolist()
    [2.0, 4.0]
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "backward",
    "forward_op",
    "finite_diff_check",
    "check_finite",
    "no_grad",
]

_ids = itertools.count()
_active: list["Tape"] = []


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shape."""


class GradientCheckError(AssertionError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised when a tensor that must be finite contains NaN or Inf."""


@dataclass
class _Node:
    op: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    # maps the output gradient to one gradient per input (None = no grad)
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Ordered record of primitive ops for one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.pop(len(_active) - 1 - _active[::-1].index(self))

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def backward(self, root: "Tensor") -> dict[int, np.ndarray]:
        """Gradients of scalar ``root`` keyed by tensor id.

        Every grad-tracked tensor seen on the tape gets an entry; tensors the
        root does not depend on get zeros.  The tape itself is not mutated,
        so repeated calls return identical results.
        """
        if root.shape != ():
            raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {root.id: np.ones((), dtype=np.float64)}
        for node in reversed(self.nodes):
            g = grads.get(node.output.id)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.id in grads:
                    grads[inp.id] = grads[inp.id] + gi
                else:
                    grads[inp.id] = gi
        for node in self.nodes:
            for inp in node.inputs:
                if inp.requires_grad and inp.id not in grads:
                    grads[inp.id] = np.zeros(inp.shape)
        return grads

    def gradients(self, root: "Tensor", wrt: Sequence["Tensor"]) -> list[np.ndarray]:
        grads = self.backward(root)
        return [grads.get(t.id, np.zeros(t.shape)) for t in wrt]


class no_grad:
    """Suspend recording on every enclosing tape."""

    def __enter__(self):
        _active.append(None)

    def __exit__(self, *exc):
        _active.pop()


def backward(tape: Tape, root: "Tensor") -> dict[int, np.ndarray]:
    return tape.backward(root)


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, *shapes: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {' and '.join(map(str, shapes))}") from None


class Tensor:
    """A float64 array, optionally tracked for reverse-mode gradients."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # arithmetic sugar; each maps onto a primitive below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    tracked = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=tracked and bool(_active) and _active[-1] is not None)
    if out.requires_grad:
        _active[-1].record(_Node(op, inputs, out, vjp))
    return out


# --- primitives -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("add", a.shape, b.shape)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("sub", a.shape, b.shape)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("mul", a.shape, b.shape)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("div", a.shape, b.shape)
    out = a.data / b.data
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def square(a) -> Tensor:
    a = _lift(a)
    return _emit("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def matmul(a, b) -> Tensor:
    """Matrix-matrix or matrix-vector product."""
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 1:
        return _emit("matmul", a.data @ b.data, (a, b),
                     lambda g: (np.outer(g, b.data) if a.requires_grad else None,
                                a.data.T @ g if b.requires_grad else None))
    return _emit("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T if a.requires_grad else None,
                            a.data.T @ g if b.requires_grad else None))


def relu(a) -> Tensor:
    a = _lift(a)
    out = np.maximum(a.data, 0.0)
    return _emit("relu", out, (a,), lambda g: (g * (out > 0),))


def sigmoid(a) -> Tensor:
    a = _lift(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _lift(a)
    return _emit("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sum_(a, axis=None) -> Tensor:
    a = _lift(a)
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", out, (a,), vjp)


def mean(a, axis=None) -> Tensor:
    a = _lift(a)
    count = a.data.size if axis is None else a.shape[axis]
    if count == 0:
        raise ShapeError(f"mean: empty reduction over shape {a.shape}")
    return sum_(a, axis) * (1.0 / count)


def broadcast_to(a, shape) -> Tensor:
    a = _lift(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    return _emit("broadcast", out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def take(a, index) -> Tensor:
    a = _lift(a)
    out = a.data[index]

    def vjp(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return _emit("take", np.array(out), (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(_lift(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def softmax(logits) -> Tensor:
    logits = _lift(logits)
    if logits.ndim != 2:
        raise ShapeError(f"softmax: expected n x C logits, got {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return _emit("softmax", p, (logits,),
                 lambda g: (p * (g - (g * p).sum(axis=1, keepdims=True)),))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Per-sample ``-log softmax(logits)[label]``, shape (n,)."""
    logits = _lift(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    out = logsumexp - z[rows, labels]
    p = np.exp(z - logsumexp[:, None])

    def vjp(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return (d * g[:, None],)

    return _emit("softmax_cross_entropy", out, (logits,), vjp)


def dropout(a, rate: float, seed) -> Tensor:
    """Inverted dropout with a mask drawn from ``default_rng(seed)``.

    ``rate == 0`` returns the input unchanged, which is how evaluation and
    gradient checks switch it off.
    """
    a = _lift(a)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    keep = np.random.default_rng(seed).random(a.shape, dtype=np.float32) >= rate
    scale = keep / (1.0 - rate)
    return _emit("dropout", a.data * scale, (a,), lambda g: (g * scale,))


_PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "square": square,
    "matmul": matmul,
    "relu": relu,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "sum": sum_,
    "mean": mean,
    "broadcast": broadcast_to,
    "reshape": reshape,
    "take": take,
    "softmax": softmax,
    "softmax_cross_entropy": softmax_cross_entropy,
    "dropout": dropout,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply the primitive named ``kind``; see ``_PRIMITIVES`` for the list."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}; expected one of {sorted(_PRIMITIVES)}") from None
    return fn(*inputs, **kwargs)


def check_finite(t: Tensor, name: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return t


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params,
    eps: float = 1e-6,
    tol: float | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` is called with no arguments and must read the current values
    of ``params`` (a sequence of tensors or anything with ``parameters()``);
    it is re-run with each parameter entry nudged by ``±eps``.  With ``tol``
    set, an error above it raises :class:`GradientCheckError`.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params.parameters() if hasattr(params, "parameters") else params)
    with Tape() as tape:
        loss = loss_fn()
    if not np.isfinite(loss.data):
        raise NonFiniteError("loss is not finite at the base point")
    analytic = tape.gradients(loss, params)

    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteError(f"loss is not finite at probe {i} of parameter {p.id}")
            central = (up - down) / (2.0 * eps)
            err = abs(gflat[i] - central) / (abs(gflat[i]) + abs(central) + 1e-12)
            worst = max(worst, err)
    if tol is not None and worst > tol:
        raise GradientCheckError(f"max relative gradient error {worst:.3g} exceeds {tol:g}")
    return worst
