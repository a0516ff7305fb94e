"""Dense tensors and the reverse-mode gradient tape.

A :class:`Tensor` wraps a contiguous numpy buffer. Differentiable operations in
:mod:`mvad.ops` record a :class:`Node` on the active :class:`Tape` whenever any
input requires a gradient; :meth:`Tape.backward` replays those nodes in exact
reverse execution order.

Usage:
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.mul(x, x))
        tape.backward(loss)
    x.grad  # 2 * x
"""

from __future__ import annotations

import contextlib
import logging
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from mvad.errors import NonFiniteError, ShapeError, TapeError

logger = logging.getLogger(__name__)

_DTYPES = {"float32": np.float32, "float64": np.float64}

_default_dtype: ContextVar[type] = ContextVar("mvad_default_dtype", default=np.float64)
_active_tape: ContextVar["Tape | None"] = ContextVar("mvad_active_tape", default=None)
_grad_enabled: ContextVar[bool] = ContextVar("mvad_grad_enabled", default=True)


def get_default_dtype() -> type:
    return _default_dtype.get()


@contextlib.contextmanager
def precision(dtype: str | type) -> Iterator[None]:
    """Set the dtype of newly created tensors (float64 for tests, float32 for training)."""
    if isinstance(dtype, str):
        try:
            dtype = _DTYPES[dtype]
        except KeyError:
            raise ValueError(f"Unknown precision '{dtype}'. Use one of {sorted(_DTYPES)}.")
    token = _default_dtype.set(dtype)
    try:
        yield
    finally:
        _default_dtype.reset(token)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording: ops inside run forward only."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_recording() -> bool:
    return _grad_enabled.get() and _active_tape.get() is not None


class Tensor:
    """Dense n-dimensional array with optional gradient participation.

    Invariants: ``data`` is contiguous and finite; ``grad``, when present, has
    the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(
        self,
        data,
        *,
        requires_grad: bool = False,
        dtype: type | None = None,
        name: str | None = None,
    ):
        arr = np.ascontiguousarray(data, dtype=dtype or get_default_dtype())
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"Tensor {name or ''} created with non-finite values")
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> Tensor:
        """Adopt an already-validated contiguous array without copying."""
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(arr)
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        return out

    @classmethod
    def zeros(cls, shape: Sequence[int], **kwargs) -> Tensor:
        return cls(np.zeros(tuple(shape)), **kwargs)

    @classmethod
    def ones(cls, shape: Sequence[int], **kwargs) -> Tensor:
        return cls(np.ones(tuple(shape)), **kwargs)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Run the active tape's backward pass from this scalar."""
        tape = _active_tape.get()
        if tape is None:
            raise TapeError("backward() called with no active tape")
        tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # Operator sugar delegates to mvad.ops so recording stays in one place.
    def __add__(self, other):
        from mvad import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from mvad import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from mvad import ops

        return ops.mul(self, other)

    def __neg__(self):
        from mvad import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from mvad import ops

        return ops.matmul(self, other)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class Node:
    """One executed differentiable op and the closure computing its input gradients."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: BackwardFn
    index: int = 0


@dataclass
class Tape:
    """Ordered record of differentiable ops executed while the tape is active."""

    nodes: list[Node] = field(default_factory=list)
    _consumed: bool = False
    _token: object = None

    def __enter__(self) -> Tape:
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, fn: BackwardFn) -> None:
        if self._consumed:
            raise TapeError("Cannot record on a tape that already ran backward; call reset()")
        self.nodes.append(Node(op, inputs, output, fn, index=len(self.nodes)))

    def reset(self) -> None:
        self.nodes.clear()
        self._consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad.

        Nodes are visited in exact reverse execution order. Nodes whose output
        received no gradient are skipped.
        """
        if self._consumed:
            raise TapeError("backward() already ran on this tape; call reset() first")
        if root.data.size != 1:
            raise TapeError(f"backward() root must be a scalar, got shape {root.shape}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            in_grads = node.backward_fn(g_out)
            for tensor, g in zip(node.inputs, in_grads):
                if g is None or not tensor.requires_grad:
                    continue
                if g.shape != tensor.shape:
                    raise TapeError(
                        f"{node.op} produced gradient of shape {g.shape} "
                        f"for input of shape {tensor.shape}"
                    )
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g

        # Every produced output was popped above; what remains belongs to leaves.
        leaves = {id(t): t for n in self.nodes for t in n.inputs if t.requires_grad}
        leaves.setdefault(id(root), root)
        for key, g in grads.items():
            leaf = leaves.get(key)
            if leaf is None:
                continue
            g = g.astype(leaf.data.dtype, copy=False)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        logger.debug(f"Backward over {len(self.nodes)} recorded ops")


def make_result(
    op: str,
    data: np.ndarray,
    inputs: tuple[Tensor, ...],
    backward_fn: BackwardFn,
) -> Tensor:
    """Wrap ``data`` as an op output and record it when any input needs a gradient."""
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    needs_grad = is_recording() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=needs_grad)
    if needs_grad:
        _active_tape.get().record(op, inputs, out, backward_fn)
    return out


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)
