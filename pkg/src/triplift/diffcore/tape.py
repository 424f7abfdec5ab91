"""Tape-based reverse-mode automatic differentiation over dense numpy arrays.

A ``Tape`` records every differentiable primitive in execution order; walking
the record backwards visits nodes in exact reverse topological order, so a
single linear sweep propagates adjoints. One tape per training step; forward
evaluation without an active tape runs plain numpy (inference mode).
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64
FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when tensor shapes violate an operation's contract."""


class TapeTensor:
    """Dense multi-dimensional value that can carry a gradient.

    ``data`` is a real numpy array (float32 or float64), ``grad`` matches its
    shape once a backward pass has accumulated into it. Tensors are treated as
    immutable after creation; only the optimizer rewrites parameter ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        return (
            f"TapeTensor(shape={self.shape}, dtype={self.data.dtype.name}, "
            f"requires_grad={self.requires_grad})"
        )


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_TAPE_STACK: list["Tape"] = []


def active_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of executed primitives with input/output references."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"

    def __len__(self) -> int:
        return len(self._nodes)

    def record(
        self,
        out: TapeTensor,
        inputs: Sequence[TapeTensor],
        backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    ) -> None:
        self._nodes.append(_Node(out, tuple(inputs), backward))

    def clear(self) -> None:
        """Drop all recorded nodes, freeing intermediate gradient storage."""
        self._nodes.clear()

    def backward(self, loss: TapeTensor) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every recorded tensor
        with ``requires_grad``. Accumulation is additive: a second backward
        pass over the same tape doubles every gradient.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ValueError("loss does not require grad; nothing to differentiate")

        adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owner: dict[int, TapeTensor] = {id(loss): loss}

        for node in reversed(self._nodes):
            g = adjoint.get(id(node.out))
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + gi
                else:
                    adjoint[key] = gi
                    owner[key] = inp

        for key, tensor in owner.items():
            if tensor.requires_grad:
                tensor.accumulate_grad(adjoint[key])


def record(out, inputs, backward) -> None:
    """Record a node on the active tape; no-op when no tape is active or the
    output does not participate in differentiation."""
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, inputs, backward)


def result_of(inputs: Sequence[TapeTensor], data: np.ndarray) -> TapeTensor:
    out = TapeTensor(data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    return out


def as_tensor(x, dtype=None) -> TapeTensor:
    if isinstance(x, TapeTensor):
        return x
    return TapeTensor(x, dtype=dtype)


def constant(x, dtype=None) -> TapeTensor:
    """Wrap a value as a non-differentiable tensor."""
    t = TapeTensor(np.asarray(x), dtype=dtype)
    t.requires_grad = False
    return t
