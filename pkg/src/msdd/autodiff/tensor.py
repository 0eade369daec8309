"""
Tensor, tape and reverse-mode traversal.
"""
from __future__ import annotations

from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterator, List, Sequence, Tuple

import numpy as np

_SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


# -----------------------------------------------------------------------------
# Tensor
# -----------------------------------------------------------------------------


class Tensor:
    """N-dimensional float32/float64 array with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in _SUPPORTED_DTYPES:
                dtype = data.dtype
            else:
                dtype = np.float32
        array = np.asarray(data, dtype=dtype)
        if array.dtype not in _SUPPORTED_DTYPES:
            raise TypeError(f"Unsupported dtype {array.dtype}, expected float32 or float64.")
        if not np.isfinite(array).all():
            raise NonFiniteError("Tensor values must be finite.")

        self.data: np.ndarray = array
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def needs_grad(self) -> bool:
        """Whether operations consuming this tensor must be recorded."""
        return self.requires_grad

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}.")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.dtype)

    # Operator sugar, the primitives live in ops.py
    def __add__(self, other: Tensor) -> Tensor:
        from msdd.autodiff import ops

        return ops.add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        from msdd.autodiff import ops

        return ops.sub(self, other)

    def __mul__(self, other: Tensor | float) -> Tensor:
        from msdd.autodiff import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        from msdd.autodiff import ops

        return ops.scale(self, -1.0)

    def __truediv__(self, other: float) -> Tensor:
        from msdd.autodiff import ops

        return ops.scale(self, 1.0 / float(other))

    def sum(self) -> Tensor:
        from msdd.autodiff import ops

        return ops.sum(self)

    def mean(self) -> Tensor:
        from msdd.autodiff import ops

        return ops.mean(self)

    def reshape(self, *shape: int) -> Tensor:
        from msdd.autodiff import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


class Parameter(Tensor):
    """Named learnable tensor. Frozen parameters are skipped by the optimizer."""

    __slots__ = ("name", "frozen")

    def __init__(self, name: str, data: Any, frozen: bool = False, dtype: Any = None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.frozen = frozen

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"

    @property
    def tensor(self) -> Tensor:
        return self

    @property
    def needs_grad(self) -> bool:
        return self.requires_grad and not self.frozen


# -----------------------------------------------------------------------------
# Tape
# -----------------------------------------------------------------------------

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Node:
    """One executed primitive: its inputs, its output and its vector-Jacobian product."""

    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


_ACTIVE_TAPE: ContextVar["Tape | None"] = ContextVar("msdd_active_tape", default=None)


class Tape:
    """Ordered record of the primitives executed while the tape is active.

    Operations are only recorded when at least one input needs a gradient.
    Outside any tape nothing is recorded, which is how inference runs.
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self._token = None

    def __enter__(self) -> Tape:
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)


def current_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording, whatever tape is active."""
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


def make_result(op: str, inputs: Sequence[Tensor], data: np.ndarray, backward: BackwardFn) -> Tensor:
    """Wrap a primitive's output and record it on the active tape."""
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values.")
    out = Tensor(data, dtype=data.dtype)
    tape = current_tape()
    if tape is not None and any(t.needs_grad for t in inputs):
        out.requires_grad = True
        tape.record(Node(op, tuple(inputs), out, backward))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every recorded ancestor of ``loss``.

    Leaves accumulate into existing gradients; intermediate tensors receive
    their gradient for this pass only.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}.")
    if not loss.requires_grad:
        raise RuntimeError("The loss does not depend on any tensor recorded on the tape.")

    pending: Dict[int, Tuple[Tensor, np.ndarray]] = {id(loss): (loss, np.ones_like(loss.data))}
    produced = set()
    for node in reversed(tape.nodes):
        produced.add(id(node.output))
        entry = pending.pop(id(node.output), None)
        if entry is None:
            continue
        _, grad = entry
        node.output.grad = grad
        for tensor, input_grad in zip(node.inputs, node.backward(grad)):
            if input_grad is None or not tensor.needs_grad:
                continue
            key = id(tensor)
            if key in pending:
                pending[key] = (tensor, pending[key][1] + input_grad)
            else:
                pending[key] = (tensor, input_grad)

    if id(loss) not in produced and loss.requires_grad and not isinstance(loss, Parameter):
        raise RuntimeError("The tape does not cover the loss' ancestry.")

    # What remains are leaves
    for tensor, grad in pending.values():
        grad = grad.astype(tensor.dtype, copy=False)
        tensor.grad = grad if tensor.grad is None else tensor.grad + grad
