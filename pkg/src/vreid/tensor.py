"""Dense float64 tensors on a reverse-mode differentiation tape.

A ``Tensor`` wraps a contiguous row-major float64 array. Operations (see
``vreid.ops``) record an entry on the currently active ``Tape``; replaying
the entries in reverse accumulates d(loss)/d(tensor) into ``.grad`` for
every tensor that requires gradients. Recording order is creation order,
which is topological by construction, so accumulation is deterministic.

With no tape active, operations run forward-only (evaluation mode) and
produce tensors with ``requires_grad=False``.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError

__all__ = ["Tensor", "Tape", "backward", "active_tape"]

_TAPE_STACK: list["Tape"] = []


def active_tape() -> Optional["Tape"]:
    """The innermost tape currently recording, or None."""
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """N-dimensional float64 value, optionally carrying a gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, _checked: bool = False):
        arr = np.asarray(data, dtype=np.float64, order="C")
        if not _checked and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor holds NaN or Inf")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item() on tensor of shape {self.shape}")

    def detach(self) -> "Tensor":
        """Same data, severed from the tape (no gradient flows through)."""
        return Tensor(self.data, requires_grad=False, _checked=True)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar delegates to ops (imported lazily to avoid a cycle).
    def __add__(self, other):
        from . import ops

        return ops.add_maps(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    def __rmul__(self, other):
        from . import ops

        return ops.scale(self, float(other))

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def sum(self):
        from . import ops

        return ops.sum_all(self)

    def mean(self):
        from . import ops

        return ops.mean_all(self)


class _Entry:
    """One recorded operation: output node, input nodes, backward rule.

    ``backward_fn(grad_out) -> sequence of input gradients`` aligned with
    ``inputs``; entries may return None for inputs that need no gradient.
    """

    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations; supports one backward replay per loss."""

    def __init__(self):
        self._entries: list[_Entry] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> None:
        self._entries.append(_Entry(out, inputs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into t.grad for every recorded tensor.

        Entries are visited exactly once, newest first; inputs always precede
        their consumers on the tape, so every node's output gradient is
        complete before its own backward rule runs.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.accumulate_grad(np.ones_like(loss.data))
        for entry in reversed(self._entries):
            g_out = entry.out.grad
            if g_out is None:
                continue
            grads = entry.backward_fn(g_out)
            for inp, g in zip(entry.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                inp.accumulate_grad(g)


def backward(tape: Tape, loss: Tensor) -> None:
    """Replay ``tape`` in reverse from the scalar ``loss`` node."""
    tape.backward(loss)
