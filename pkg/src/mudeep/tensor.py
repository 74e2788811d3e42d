"""Tensor storage, trainable parameters and the reverse-mode recording tape.

Ops only record onto a tape while one is active (``with Tape() as tape:``).
Outside a tape everything runs as plain inference with no bookkeeping.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

_DTYPE = np.dtype(np.float32)
_TAPES: list["Tape"] = []


def get_dtype() -> np.dtype:
    return _DTYPE


def set_dtype(dtype) -> None:
    """Set the global floating point precision (float32 or float64)."""
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dt}; use float32 or float64")
    _DTYPE = dt


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    prev = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(prev)


class Tensor:
    """Dense N-d array with an optional gradient slot.

    ``grad`` is only populated on leaves (tensors not produced by a recorded
    op) that have ``requires_grad`` set.
    """

    __slots__ = ("data", "requires_grad", "grad", "_is_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._is_leaf = True

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._is_leaf = True
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def reshape(self, *shape) -> "Tensor":
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


class Parameter(Tensor):
    """Named trainable tensor.

    The array may be left unallocated (``data is None``) until
    :func:`mudeep.layers.init_parameters` materializes it, which lets the
    full-width model be described and shape-checked without allocating
    its half-billion-weight embedding layer.
    """

    __slots__ = ("name", "_shape", "_frozen", "kind", "fan_in")

    def __init__(self, name: str, shape: Sequence[int], kind: str = "weight", fan_in: int = 0):
        self.name = name
        self._shape = tuple(int(s) for s in shape)
        self.data = None
        self.grad = None
        self._is_leaf = True
        self._frozen = False
        self.requires_grad = True
        self.kind = kind
        self.fan_in = fan_in

    @property
    def shape(self) -> tuple[int, ...]:
        return self._shape

    @property
    def size(self) -> int:
        return int(np.prod(self._shape, dtype=np.int64))

    @property
    def value(self) -> np.ndarray:
        return self.data

    @property
    def materialized(self) -> bool:
        return self.data is not None

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, flag: bool) -> None:
        self._frozen = bool(flag)
        self.requires_grad = not self._frozen

    def assign(self, arr: np.ndarray) -> None:
        arr = np.asarray(arr)
        if arr.shape != self._shape:
            raise ValueError(f"{self.name}: expected shape {self._shape}, got {arr.shape}")
        self.data = np.array(arr, dtype=arr.dtype if arr.dtype.kind == "f" else _DTYPE)
        self.grad = np.zeros_like(self.data)

    def astype(self, dtype) -> None:
        if self.data is not None:
            self.data = self.data.astype(dtype)
            self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        if self.data is not None:
            if self.grad is None or self.grad.dtype != self.data.dtype:
                self.grad = np.zeros_like(self.data)
            else:
                self.grad.fill(0)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self._shape}, frozen={self._frozen})"


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: tuple[Tensor, ...], output: Tensor, backward: BackwardFn):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops.

    ``backward`` walks nodes in exact reverse recording order and adds leaf
    gradients into ``Tensor.grad``; a leaf reached through several paths
    (e.g. a weight shared by both Siamese branches) receives the sum.
    The tape keeps its nodes, so calling ``backward`` twice doubles every
    accumulated gradient.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, backward: BackwardFn) -> None:
        output.requires_grad = True
        output._is_leaf = False
        self.nodes.append(Node(inputs, output, backward))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if loss.size != 1:
                raise ValueError("backward() without an explicit grad needs a scalar output")
            grad = np.ones_like(loss.data)
        pending: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        if loss._is_leaf:
            _accumulate_leaf(loss, pending[id(loss)])
            return
        for node in reversed(self.nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._is_leaf:
                    _accumulate_leaf(t, gi)
                else:
                    key = id(t)
                    prev = pending.get(key)
                    pending[key] = gi if prev is None else prev + gi


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        g = np.broadcast_to(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def record(inputs: tuple[Tensor, ...], out: Tensor, backward: BackwardFn) -> Tensor:
    """Attach ``out`` to the active tape if any input needs a gradient."""
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(inputs, out, backward)
    return out


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)
