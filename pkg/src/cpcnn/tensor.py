"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the tape that is active in the current
thread (``with Tape() as tape: ...``).  Outside a tape every op is a plain
forward computation, which is what inference uses.

Leaves are tensors created with ``requires_grad=True``.  They are registered
on a tape the first time an op consumes them, so the same parameter tensor
can take part in many tapes over a training run.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_local = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class Tensor:
    """N-d array of reals, optionally traced on a :class:`Tape`."""

    __slots__ = ("data", "grad", "requires_grad", "node", "_tape", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: int | None = None
        self._tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


@dataclass
class _Node:
    kind: str
    inputs: tuple[int | None, ...]
    backward: Callable | None
    leaf: Tensor | None = None


@dataclass
class Tape:
    """Append-only record of traced operations."""

    nodes: list[_Node] = field(default_factory=list)
    _leaf_ids: dict[int, int] = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def node_of(self, t: Tensor) -> int | None:
        if t._tape is self:
            return t.node
        if t.requires_grad:
            idx = self._leaf_ids.get(id(t))
            if idx is None:
                idx = len(self.nodes)
                self.nodes.append(_Node("leaf", (), None, leaf=t))
                self._leaf_ids[id(t)] = idx
            return idx
        return None

    def leaves(self) -> list[Tensor]:
        return [n.leaf for n in self.nodes if n.leaf is not None]


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_trace:
    """Suspend recording inside an active tape (used for detached forwards)."""

    def __enter__(self):
        stack = _tape_stack()
        self._saved = list(stack)
        stack.clear()
        return self

    def __exit__(self, *exc):
        _tape_stack().extend(self._saved)


class branch_probe:
    """Collect the branch pattern (masks, argmaxes, signs) of non-smooth ops.

    Finite-difference checks use it to tell whether two evaluations sit on
    the same smooth piece of a piecewise-smooth function.
    """

    def __enter__(self) -> "branch_probe":
        self.patterns: list[np.ndarray] = []
        _local.probe = self
        return self

    def __exit__(self, *exc) -> None:
        _local.probe = None

    def same_as(self, other: "branch_probe") -> bool:
        return len(self.patterns) == len(other.patterns) and all(
            np.array_equal(a, b) for a, b in zip(self.patterns, other.patterns))


def note_branch(pattern: np.ndarray) -> None:
    probe = getattr(_local, "probe", None)
    if probe is not None:
        probe.patterns.append(np.array(pattern, copy=True))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of ``kind`` and trace it if any input is traced.

    ``backward(grad, needs)`` returns one gradient (or None) per input;
    ``needs[i]`` tells whether input ``i`` is traced.
    """
    out = Tensor(data)
    tape = current_tape()
    if tape is None:
        return out
    ids = tuple(tape.node_of(t) for t in inputs)
    if all(i is None for i in ids):
        return out
    out.node = len(tape.nodes)
    out._tape = tape
    tape.nodes.append(_Node(kind, ids, backward))
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    """Back-propagate a scalar loss through ``tape``.

    Gradients are summed into ``leaf.grad`` (callers zero them between
    steps) and the per-call contributions are returned keyed by leaf.
    Leaves registered on the tape but unreachable from the loss get zeros.
    """
    tape = tape or loss._tape
    if loss.size != 1 or loss.data.ndim > 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar of shape [1]")
    if tape is None or loss._tape is not tape:
        raise ValueError("backward: loss is not traced on the given tape")
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[loss.node] = np.ones_like(loss.data)
    for idx in range(loss.node, -1, -1):
        g = grads[idx]
        node = tape.nodes[idx]
        if g is None or node.backward is None:
            continue
        needs = tuple(i is not None for i in node.inputs)
        in_grads = node.backward(g, needs)
        for i, gi in zip(node.inputs, in_grads):
            if i is None or gi is None:
                continue
            grads[i] = gi if grads[i] is None else grads[i] + gi
        grads[idx] = None  # release intermediate memory
    result: dict[Tensor, np.ndarray] = {}
    for idx, node in enumerate(tape.nodes):
        leaf = node.leaf
        if leaf is None:
            continue
        g = grads[idx]
        g = np.zeros_like(leaf.data) if g is None else g.astype(leaf.data.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    return result


# ---------------------------------------------------------------- elementwise


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(op, a.shape, b.shape)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)

    def bw(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return record("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)

    def bw(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return record("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)

    def bw(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return record("mul", a.data * b.data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return record("scale", a.data * a.data.dtype.type(s), (a,), lambda g, n: (g * s,))


def neg(a: Tensor) -> Tensor:
    return record("neg", -a.data, (a,), lambda g, n: (-g,))


def tensor_sum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype).reshape(1)
    return record("sum", out, (a,), lambda g, n: (np.broadcast_to(g.reshape(()), a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    k = a.size
    out = np.asarray(a.data.mean(), dtype=a.dtype).reshape(1)
    return record("mean", out, (a,),
                  lambda g, n: (np.full(a.shape, g.reshape(()) / k, dtype=a.dtype),))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    note_branch(sign)
    return record("abs", np.abs(a.data), (a,), lambda g, n: (g * sign,))


def square(a: Tensor) -> Tensor:
    return record("square", a.data * a.data, (a,), lambda g, n: (2.0 * a.data * g,))


def log(a: Tensor, eps: float = 0.0) -> Tensor:
    if eps:
        note_branch(a.data > eps)
    x = np.maximum(a.data, eps) if eps else a.data
    return record("log", np.log(x), (a,), lambda g, n: (g / x,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return record("reshape", a.data.reshape(shape), (a,), lambda g, n: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis`` (channels for context fusion)."""
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            x != y for i, (x, y) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError("concat", ref, t.shape, detail=f"axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g, needs):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if need else None for p, need in zip(parts, needs))

    return record("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def tensor_add(a, b) -> Tensor:
    return add(a, b)


def tensor_mul(a, b) -> Tensor:
    return mul(a, b)


def tensor_scale(a, s: float) -> Tensor:
    return scale(as_tensor(a), s)


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: OptimizerState) -> None:
    """In-place momentum SGD: ``v <- mu*v - lr*g; p <- p + v``."""
    if len(params) != len(grads):
        raise ValueError(f"sgd_step: {len(params)} params but {len(grads)} grads")
    if not state.velocity:
        state.velocity = [np.zeros_like(p.data) for p in params]
    if len(state.velocity) != len(params):
        raise ValueError("sgd_step: optimizer state belongs to a different parameter list")
    lr, mu = state.learning_rate, state.momentum
    for p, g, v in zip(params, grads, state.velocity):
        if v.shape != p.shape:
            raise ShapeError("sgd_step", p.shape, v.shape, detail="velocity")
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError("sgd_step", p.shape, g.shape)
        v *= mu
        v -= lr * g
        p.data += v


class SGD:
    """Momentum SGD bound to a fixed parameter list."""

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.state = OptimizerState(lr, momentum)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        sgd_step(self.params, [p.grad for p in self.params], self.state)
