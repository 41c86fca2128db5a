"""Dense 5-axis tensors and tape-based reverse-mode differentiation.

Every value flowing through the network is a :class:`Tensor` with shape
``[N, C, D, H, W]`` (row-major, W fastest). Operations executed while a
:class:`Tape` is active record backward closures onto it; ``backward(root,
tape)`` replays the tape in reverse and accumulates gradients into the
``grad`` buffer of every tensor that requires them.

Tensors are float32 by default. Gradient checking runs the same programs in
float64 ("shadow mode"); all operations preserve the dtype of their inputs.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(ArithmeticError):
    """A forward or backward value came out NaN or infinite."""


class TapeError(RuntimeError):
    """Tape misuse: backward on a consumed tape, non-scalar root, etc."""


_FLOAT_DTYPES = (np.float32, np.float64)

_state = threading.local()

_finite_checks = True


def set_finite_checks(enabled: bool) -> None:
    """Globally enable or disable NaN/Inf screening of op results."""
    global _finite_checks
    _finite_checks = bool(enabled)


def finite_checks_enabled() -> bool:
    return _finite_checks


def check_finite(arr: np.ndarray, context: str) -> None:
    if _finite_checks and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {context}")


class Tensor:
    """5-axis array with an optional gradient buffer.

    Attributes:
        data: contiguous float ndarray of shape [N, C, D, H, W].
        grad: same-shape gradient buffer, or None before any accumulation.
        requires_grad: whether backward should accumulate into this tensor.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim != 5:
            raise ShapeError(f"Tensor requires 5 axes [N,C,D,H,W], got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of {self.data.size} elements")
        return float(self.data.reshape(())[()])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        check_finite(g, "gradient")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def scalar(value: float, dtype=np.float32) -> Tensor:
    """A [1,1,1,1,1] tensor holding one value."""
    return Tensor(np.full((1, 1, 1, 1, 1), value, dtype=dtype))


class TapeNode:
    """One executed primitive: its operands, result, and backward closure."""

    __slots__ = ("name", "inputs", "output", "backward_fn")

    def __init__(self, name: str, inputs: Sequence[Tensor], output: Tensor,
                 backward_fn: Callable[[np.ndarray], None]):
        self.name = name
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive operations for one backward pass.

    Use as a context manager; operations executed inside record themselves
    when any operand requires a gradient. A tape is confined to the thread
    that opened it and can be replayed exactly once.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _state.tapes.pop()

    def record(self, name: str, inputs: Sequence[Tensor], output: Tensor,
               backward_fn: Callable[[np.ndarray], None]) -> None:
        self.nodes.append(TapeNode(name, inputs, output, backward_fn))

    def backward(self, root: Tensor) -> None:
        backward(root, self)


def active_tape() -> Optional[Tape]:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def backward(root: Tensor, tape: Tape) -> None:
    """Accumulate gradients of the scalar `root` into every recorded operand.

    Seeds d(root)/d(root) = 1 and replays the tape in reverse, visiting each
    recorded operation exactly once. Tensors never touched by the replay keep
    whatever grad buffer they already had (zeros after `zero_grad`).
    """
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    if root.data.size != 1:
        raise TapeError(f"backward root must be scalar, got shape {root.shape}")
    tape.consumed = True
    root.grad = np.ones_like(root.data)
    for node in reversed(tape.nodes):
        gout = node.output.grad
        if gout is None:
            continue
        node.backward_fn(gout)


def record_op(name: str, inputs: Iterable[Tensor], out_data: np.ndarray,
              backward_fn_factory) -> Tensor:
    """Finalize a primitive: wrap the result, screen it, record on the tape.

    `backward_fn_factory` is called lazily (only when recording happens) and
    must return a closure taking the upstream gradient array.
    """
    check_finite(out_data, name)
    inputs = tuple(inputs)
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(name, inputs, out, backward_fn_factory())
    return out
