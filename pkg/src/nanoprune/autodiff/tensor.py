"""Dense tensors and the tape that records operations on them."""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPES = {"float32": np.float32, "float64": np.float64}

_tape_stack: list["Tape"] = []
_node_ids = itertools.count()


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(_DTYPES[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}") from None
    dt = np.dtype(precision)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


class Tensor:
    """An immutable row-major array of reals, optionally tracked for gradients.

    Identity (not value) is used for hashing so tensors can key gradient maps.
    """

    __slots__ = ("data", "requires_grad", "node_id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(resolve_dtype(dtype), copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; the kernels live in ops.py
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)


def _not_scalar(t: Tensor):
    raise ValueError(f"tensor of shape {t.shape} is not a scalar")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class Tape:
    """Single-writer record of differentiable operations.

    Records are appended in execution order, so a record's inputs always
    precede it; the reverse pass simply walks the list backwards.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._closed = False

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        top = _tape_stack.pop()
        assert top is self, "tapes must be exited in LIFO order"

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        self.records.append((out, tuple(inputs), backward))

    def __len__(self) -> int:
        return len(self.records)


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def attach(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap a kernel result; record it when any input is tracked on the active tape.

    ``backward(g)`` receives the output gradient and returns one gradient (or
    None) per input, in order.
    """
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward)
    return out


def grad(loss: Tensor, params: Iterable[Tensor], tape: Tape | None = None) -> dict[Tensor, Tensor]:
    """Reverse-mode gradients of a scalar ``loss`` with respect to ``params``.

    Parameters that never reached ``loss`` get zero gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    params = list(params)
    if tape is None:
        tape = active_tape()
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    if tape is not None:
        for out, inputs, backward in reversed(tape.records):
            g = grads.pop(out.node_id, None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                prev = grads.get(inp.node_id)
                grads[inp.node_id] = gi if prev is None else prev + gi
    return {
        p: Tensor(grads.get(p.node_id, np.zeros_like(p.data)).astype(p.dtype, copy=False))
        for p in params
    }
