"""Reverse-mode autodiff core: tensors, parameters, and the op tape.

All learnable state lives in float64 by default; float32 is supported for
speed-critical training runs. Ops record themselves on the active Tape
(if any); Tape.backward walks the records in exact reverse order, so each
executed op is visited exactly once.
"""

from __future__ import annotations

import threading

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense multi-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad=True):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def accumulate_grad(self, g, own=False):
        """Add a gradient contribution. `own=True` means the caller hands
        over a freshly allocated array that may be bound without copying."""
        if self.grad is None:
            self.grad = g if own else np.array(g, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """Named trainable tensor. Names must be unique within a model."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name, trainable=True, dtype=None):
        super().__init__(data, dtype=dtype)
        self.name = name
        self.trainable = trainable

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, trainable={self.trainable})"


class Tape:
    """Ordered record of executed ops; backward traverses in exact reverse."""

    def __init__(self):
        self._records = []

    def __len__(self):
        return len(self._records)

    def record(self, output, backward_fn):
        self._records.append((output, backward_fn))

    def __enter__(self):
        _push_tape(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _pop_tape(self)
        return False

    def backward(self, loss):
        """Accumulate d(loss)/d(input) into every tensor the tape touched.

        ``loss`` must be a scalar produced while this tape was active.
        """
        if not isinstance(loss, Tensor):
            raise TypeError("loss must be a Tensor")
        if loss.data.shape != ():
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        if not self._records or self._records[-1][0] is not loss:
            produced = any(out is loss for out, _ in self._records)
            if not produced:
                raise ValueError("loss was not produced on this tape")
        loss.grad = np.ones((), dtype=loss.data.dtype)
        for out, backward_fn in reversed(self._records):
            if out.grad is None:
                continue
            backward_fn(out.grad)


_state = threading.local()


def _push_tape(tape):
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    stack.append(tape)


def _pop_tape(tape):
    stack = _state.stack
    if not stack or stack[-1] is not tape:
        raise RuntimeError("tape exit out of order")
    stack.pop()


def active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)
