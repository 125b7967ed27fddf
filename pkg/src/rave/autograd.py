"""Minimal reverse-mode differentiation over numpy arrays.

Tensors hold an ``np.ndarray`` plus an optional gradient buffer. Operations
executed while a :class:`Tape` is active (``with tape: ...``) are recorded when
at least one input requires a gradient; ``tape.backward(loss)`` replays the
record in reverse and writes ``.grad`` on every tensor that asked for one.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible.

    ``axis`` names the offending axis (or ``None`` when the rank itself is wrong).
    """

    def __init__(self, message: str, axis: int | None = None):
        super().__init__(message)
        self.axis = axis


class DomainError(ValueError):
    """Raised when an operation is evaluated outside its numeric domain."""


class TapeError(RuntimeError):
    pass


_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of 4")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in rave.ops
    def __add__(self, other):
        from rave import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from rave import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from rave import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from rave import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from rave import ops

        return ops.neg(self)

    def __getitem__(self, index):
        from rave import ops

        return ops.index(self, index)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=np.float32))
    return Tensor(x, dtype=dtype)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of an op and record it if a tape is listening."""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = _active_tape()
    if needs and tape is not None:
        tape._record(out, tuple(inputs), backward)
    elif needs:
        # no tape: the result is a plain value
        out.requires_grad = False
    return out


class Tape:
    """Ordered record of differentiable operations.

    A tape can be replayed exactly once; call :meth:`reset` to reuse it.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise TapeError("tape already consumed by backward(); call reset() first")
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], fn: BackwardFn) -> None:
        self._records.append((out, inputs, fn))

    def reset(self) -> None:
        self._records = []
        self._consumed = False

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Propagate d(loss)/d(.) and store ``.grad`` on leaf tensors.

        Returns the gradient table keyed by ``id(tensor)``. Every recorded
        operation is visited once, in reverse execution order.
        """
        if self._consumed:
            raise TapeError("backward() already called on this tape")
        if loss.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = set()
        for out, inputs, fn in reversed(self._records):
            produced.add(id(out))
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        leaves = {}
        for _, inputs, _ in self._records:
            for inp in inputs:
                if inp.requires_grad and id(inp) not in produced:
                    leaves[id(inp)] = inp
        if loss.requires_grad and not self._records:
            leaves[id(loss)] = loss
        for key, leaf in leaves.items():
            g = grads.get(key)
            leaf.grad = None if g is None else np.asarray(g, dtype=leaf.dtype)
        self._records = []
        return grads


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    return tape.backward(loss)


class no_grad:
    """Suspend recording on the current thread."""

    def __enter__(self):
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(None)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
