"""Reverse-mode automatic differentiation over dense float64 tensors.

The engine is deliberately small: a Tensor wraps a row-major numpy array,
primitives record themselves on the active ComputationTape, and backward()
walks that tape once in reverse. There is no broadcasting beyond adding a
trailing vector to the last dimension; everything else must shape-match
exactly, which keeps every backward rule a few lines.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when a primitive's input shapes violate its contract."""

    def __init__(self, primitive: str, detail: str):
        super().__init__(f"{primitive}: {detail}")
        self.primitive = primitive


class Tensor:
    """Dense float64 array participating in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_node_index")

    def __init__(self, data, requires_grad: bool = False):
        # Strided views from transpose/narrow are fine internally; row-major
        # layout is enforced at serialization boundaries via C-order tobytes.
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._node_index: int = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Pickling ships only the values; graph/tape state never crosses processes.
    def __getstate__(self):
        return {"data": self.data, "requires_grad": self.requires_grad}

    def __setstate__(self, state):
        self.data = state["data"]
        self.requires_grad = state["requires_grad"]
        self.grad = None
        self._tape = None
        self._node_index = -1

    # Small amount of operator sugar; model code mostly calls the primitives.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


@dataclass
class Node:
    """One primitive application: inputs, output, and its backward rule."""

    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: object  # callable(grad_out) -> tuple of grads aligned with inputs


@dataclass
class Tape:
    """Ordered record of primitive applications, inputs before outputs."""

    records: list[Node] = field(default_factory=list)

    def record(self, node: Node) -> None:
        node.output._tape = self
        node.output._node_index = len(self.records)
        self.records.append(node)


# Tape state is thread-local: concurrent threads own independent tapes and
# recording flags, so read-only inference alongside training never interferes.
_state = threading.local()


def _stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
        _state.grad_enabled = True
    return _state.tapes


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def recording():
    """Activate a fresh tape; primitives applied inside are recorded on it."""
    tape = Tape()
    _stack().append(tape)
    try:
        yield tape
    finally:
        _state.tapes.pop()


@contextlib.contextmanager
def no_grad():
    """Disable recording; forward passes inside build no graph."""
    _stack()
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _emit(kind: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(Node(kind, inputs, out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from loss.

    Grads accumulate additively, both across multiple uses of a tensor within
    the graph and across repeated backward calls (callers zero grads between
    optimization steps). Each tape node is visited exactly once, in reverse
    application order.
    """
    if loss.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ValueError("loss was not recorded on a tape (wrap the forward pass in recording())")

    # Adjoints of tensors created on this tape; leaves accumulate into .grad.
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.records[: loss._node_index + 1]):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        # All consumers were already processed, so g is final for this node
        # and the buffer is ours: assign without copying.
        out = node.output
        if out.grad is None:
            out.grad = g
        else:
            out.grad += g
        for t, ig in zip(node.inputs, node.backward_fn(g)):
            if ig is None or not t.requires_grad:
                continue
            if t._tape is tape:
                key = id(t)
                if key in pending:
                    pending[key] += ig
                else:
                    # Copy: backward rules may return views into g.
                    pending[key] = np.array(ig)
            else:
                t.accumulate_grad(ig)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim not in (2, 3) or b.data.ndim != a.data.ndim:
        raise ShapeError("matmul", f"need matching 2-D or 3-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.data.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError("matmul", f"inner dimensions disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    return _emit("matmul", (a, b), ad @ bd, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    # Exact shape match, or trailing-vector add: (..., n) + (n,).
    vector_add = b.data.ndim == 1 and a.shape[-1:] == b.shape and a.data.ndim > 1
    if not vector_add and a.shape != b.shape:
        raise ShapeError("add", f"shapes {a.shape} and {b.shape} are not addable")

    def bwd(g):
        if vector_add:
            return g, g.reshape(-1, b.shape[0]).sum(axis=0)
        return g, g

    return _emit("add", (a, b), a.data + b.data, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("sub", f"shapes {a.shape} and {b.shape} differ")

    def bwd(g):
        return g, -g

    return _emit("sub", (a, b), a.data - b.data, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("mul", f"shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data

    def bwd(g):
        return g * bd, g * ad

    return _emit("mul", (a, b), ad * bd, bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        return (g * c,)

    return _emit("scale", (a,), a.data * c, bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def bwd(g):
        return (g * mask,)

    return _emit("relu", (a,), np.where(mask, a.data, 0.0), bwd)


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        return (g * sig * (1.0 + a.data * (1.0 - sig)),)

    return _emit("silu", (a,), a.data * sig, bwd)


def softmax(a: Tensor) -> Tensor:
    # Row-stable: subtract the per-row max before exponentiating.
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _emit("softmax", (a,), out, bwd)


def log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bwd(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", (a,), out, bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError("embedding", f"table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", f"id out of range for table with {table.shape[0]} rows")

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _emit("embedding", (table,), table.data[ids], bwd)


def rms_norm(a: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    if gain.data.ndim != 1 or gain.shape[0] != a.shape[-1]:
        raise ShapeError("rms_norm", f"gain {gain.shape} must match last dim of {a.shape}")
    n = a.shape[-1]
    ms = (a.data * a.data).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    normed = a.data * inv

    def bwd(g):
        gg = g * gain.data
        dot = (gg * a.data).sum(axis=-1, keepdims=True)
        ga = gg * inv - a.data * (inv ** 3) * dot / n
        ggain = (g * normed).reshape(-1, n).sum(axis=0)
        return ga, ggain

    return _emit("rms_norm", (a, gain), normed * gain.data, bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != a.size:
        raise ShapeError("reshape", f"cannot reshape {a.shape} to {shape}")
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    return _emit("reshape", (a,), a.data.reshape(shape), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose", f"expects a 2-D matrix, got {a.shape}")

    def bwd(g):
        return (g.T,)

    return _emit("transpose", (a,), a.data.T, bwd)


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError("permute", f"axes {axes} invalid for shape {a.shape}")
    inv = tuple(int(i) for i in np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return _emit("permute", (a,), np.transpose(a.data, axes), bwd)


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat", "needs at least one input")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _emit("concat", tuple(parts), np.concatenate([p.data for p in parts], axis=axis), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError("narrow", f"slice [{start}:{start + length}] exceeds axis {axis} of {a.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        return (ga,)

    return _emit("narrow", (a,), a.data[idx], bwd)


def mean(a: Tensor) -> Tensor:
    n = a.size

    def bwd(g):
        return (np.full_like(a.data, float(g) / n),)

    return _emit("mean", (a,), np.asarray(a.data.mean()), bwd)


def tensor_sum(a: Tensor) -> Tensor:
    def bwd(g):
        return (np.full_like(a.data, float(g)),)

    return _emit("sum", (a,), np.asarray(a.data.sum()), bwd)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.ndim != 1 or targets.shape[0] != logits.shape[0]:
        raise ShapeError("cross_entropy", f"logits {logits.shape} vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ShapeError("cross_entropy", "target id outside vocabulary")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(targets.shape[0])
    loss = -logp[rows, targets].mean()
    sm = np.exp(logp)

    def bwd(g):
        gl = sm.copy()
        gl[rows, targets] -= 1.0
        return (gl * (float(g) / targets.shape[0]),)

    return _emit("cross_entropy", (logits,), np.asarray(loss), bwd)


PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "relu": relu,
    "silu": silu,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "embedding": embedding,
    "rms_norm": rms_norm,
    "reshape": reshape,
    "transpose": transpose,
    "permute": permute,
    "concat": concat,
    "narrow": narrow,
    "mean": mean,
    "sum": tensor_sum,
    "cross_entropy": cross_entropy,
}


def apply_primitive(kind: str, *args, **kwargs) -> Tensor:
    """Apply a primitive by id; see PRIMITIVES for the available set."""
    if kind not in PRIMITIVES:
        raise KeyError(f"unknown primitive {kind!r}")
    return PRIMITIVES[kind](*args, **kwargs)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_index: int
    passed: bool
    tol: float

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"grad_check {status}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e}) at flat index {self.worst_index}"


def grad_check(f, point: Tensor, eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of scalar f(point) with central differences.

    Relative error per coordinate is |analytic - fd| / max(1, |analytic|, |fd|);
    the report carries the worst coordinate.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    point.zero_grad()
    prev_rg = point.requires_grad
    point.requires_grad = True
    try:
        with recording():
            out = f(point)
            if out.size != 1:
                raise ValueError("grad_check needs a scalar-valued function")
            backward(out)
        analytic = np.zeros_like(point.data) if point.grad is None else point.grad.copy()

        flat = point.data.reshape(-1)
        fd = np.zeros(flat.size)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(point).item()
                flat[i] = orig - eps
                fm = f(point).item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise FloatingPointError(f"non-finite value while probing coordinate {i}")
                fd[i] = (fp - fm) / (2.0 * eps)
    finally:
        point.requires_grad = prev_rg

    a = analytic.reshape(-1)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(fd)))
    rel = np.abs(a - fd) / denom
    worst = int(rel.argmax()) if rel.size else 0
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max_rel, worst, max_rel < tol, tol)
