"""Dense tensors and a tape-based reverse-mode differentiation engine.

Operations only record themselves while a :class:`Tape` is active, so code
running outside ``with Tape():`` behaves like inference mode and keeps no
graph around.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradError(RuntimeError):
    """Raised when backward is called on something it cannot differentiate."""


class Tensor:
    """N-dimensional float array with an optional gradient slot.

    Storage is float32 unless a float64 array is passed explicitly, which is
    what the gradient checks use.
    """

    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = np.float64 if arr.dtype == np.float64 else np.float32
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype, name=self.name)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    # operator sugar; the catalog lives in mccl.ops
    def __add__(self, other):
        from mccl import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from mccl import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from mccl import ops
        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from mccl import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from mccl import ops
        return ops.neg(self)

    def __truediv__(self, other):
        from mccl import ops
        return ops.div(self, other)

    def __matmul__(self, other):
        from mccl import ops
        return ops.matmul(self, other)


class Node:
    __slots__ = ("inputs", "out", "backward_fn", "op")

    def __init__(self, op: str, inputs: Sequence[Tensor], out: Tensor, backward_fn: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.out = out
        self.backward_fn = backward_fn


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; the innermost active tape receives records.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class suspend:
    """Temporarily disable recording (equivalent of a no-grad block)."""

    def __enter__(self):
        self._saved = list(_TAPE_STACK)
        _TAPE_STACK.clear()

    def __exit__(self, *exc):
        _TAPE_STACK.extend(self._saved)


def make_result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and record it when needed.

    ``backward_fn(grad_out)`` returns one gradient (or None) per input.
    """
    out = Tensor(data, dtype=_result_dtype(inputs, data))
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        tape.record(Node(op, inputs, out, backward_fn))
    return out


def _result_dtype(inputs: Sequence[Tensor], data: np.ndarray):
    if any(t.data.dtype == np.float64 for t in inputs):
        return np.float64
    if not inputs:
        return data.dtype if data.dtype in (np.float32, np.float64) else np.float32
    return np.float32


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Calling twice without zeroing gradients accumulates.
    """
    if loss.data.size != 1:
        raise GradError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.is_leaf:
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    reached = False
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        reached = True
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.data.shape:
                raise ShapeError(f"{node.op}: gradient shape {gi.shape} != input shape {t.data.shape}")
            if t.is_leaf:
                _accumulate(t, gi)
            else:
                key = id(t)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
    if not reached:
        raise GradError("loss was not produced by any operation on this tape")


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               coords: Optional[Sequence[int]] = None, kink_tol: Optional[float] = None,
               stats: Optional[dict] = None) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    ``coords`` restricts the comparison to a subset of flat indices.

    With ``kink_tol`` set, each coordinate is also differenced at ``h / 10``.
    If the two numerical estimates disagree by more than ``kink_tol`` the
    function is not smooth within ``h`` of the point (a relu crossing, say),
    so the coordinate is skipped. The test uses forward values only and cannot
    mask a wrong backward rule. ``stats`` receives ``checked`` and ``skipped``.
    """
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        y = f(x)
    if y.data.size != 1:
        raise GradError(f"grad_check needs a scalar function, got shape {y.shape}")
    backward(y, tape)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    with suspend():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(f"non-finite function value at coordinate {i}")
            num = (fp - fm) / (2 * h)
            if kink_tol is not None:
                flat[i] = orig + h / 10
                fp2 = f(x).item()
                flat[i] = orig - h / 10
                fm2 = f(x).item()
                flat[i] = orig
                fine = (fp2 - fm2) / (2 * h / 10)
                if abs(num - fine) / max(abs(num), abs(fine), 1e-8) > kink_tol:
                    if stats is not None:
                        stats["skipped"] = stats.get("skipped", 0) + 1
                    continue
            if stats is not None:
                stats["checked"] = stats.get("checked", 0) + 1
            a = float(analytic.reshape(-1)[i])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
