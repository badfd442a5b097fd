"""Class-keyed momentum memory of consensus vectors and the group triplet objective."""

from __future__ import annotations

from collections import OrderedDict
from typing import Mapping, Sequence

import numpy as np

from mccl import ops
from mccl.tensor import Tensor


class MemoryContractError(ValueError):
    """Contract violation on the consensus memory (dimension or missing class)."""


class ConsensusMemory:
    """Momentum store of the (A, B) consensus halves of every class seen so far.

    Stored vectors are plain arrays: history never carries gradient.
    """

    def __init__(self, beta: float = 0.1, alpha: float = 0.1, clamp: bool = False):
        if not 0.0 <= beta < 1.0:
            raise ValueError(f"momentum factor must lie in [0, 1), got {beta}")
        if alpha <= 0:
            raise ValueError(f"margin must be positive, got {alpha}")
        self.beta = float(beta)
        self.alpha = float(alpha)
        self.clamp = clamp
        self.entries: "OrderedDict[str, tuple[np.ndarray, np.ndarray]]" = OrderedDict()

    def __contains__(self, class_id: str) -> bool:
        return class_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def dim(self) -> int | None:
        if not self.entries:
            return None
        return next(iter(self.entries.values()))[0].shape[0]

    def update(self, class_id: str, vec_a, vec_b) -> None:
        a = np.array(vec_a.data if isinstance(vec_a, Tensor) else vec_a, dtype=np.float64)
        b = np.array(vec_b.data if isinstance(vec_b, Tensor) else vec_b, dtype=np.float64)
        if a.ndim != 1 or a.shape != b.shape:
            raise MemoryContractError(f"consensus halves must be equal-length vectors, got {a.shape} and {b.shape}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise MemoryContractError(f"non-finite consensus vector for class {class_id!r}")
        if self.dim is not None and a.shape[0] != self.dim:
            raise MemoryContractError(f"class {class_id!r}: dimension {a.shape[0]} != memory dimension {self.dim}")
        if class_id not in self.entries:
            self.entries[class_id] = (a, b)
            return
        old_a, old_b = self.entries[class_id]
        self.entries[class_id] = (
            self.beta * old_a + (1 - self.beta) * a,
            self.beta * old_b + (1 - self.beta) * b,
        )

    def get(self, class_id: str) -> tuple[np.ndarray, np.ndarray]:
        try:
            return self.entries[class_id]
        except KeyError:
            raise MemoryContractError(f"class {class_id!r} not in memory") from None

    def state(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for cid, (a, b) in self.entries.items():
            out[f"mcm/{cid}/A"] = a
            out[f"mcm/{cid}/B"] = b
        return out

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        self.entries.clear()
        names = sorted(k for k in state if k.startswith("mcm/") and k.endswith("/A"))
        for name in names:
            cid = name[len("mcm/"):-len("/A")]
            self.entries[cid] = (np.asarray(state[name], dtype=np.float64),
                                 np.asarray(state[f"mcm/{cid}/B"], dtype=np.float64))


def memory_update(mem: ConsensusMemory, class_id: str, vec_a, vec_b) -> None:
    mem.update(class_id, vec_a, vec_b)


def unit(v: Tensor, eps: float = 1e-12) -> Tensor:
    """``v / |v|``, differentiable; used when consensus vectors are compared on the unit sphere."""
    return ops.div(v, ops.add_scalar(ops.l2_norm(v), eps))


def triplet_loss(c1: tuple, c2: tuple, alpha: float = 0.1, clamp: bool = False) -> Tensor:
    """``|c1A - c1B| - |c1A - c2B| + alpha``; optionally hinged at zero.

    Members may be Tensors (gradient-carrying) or arrays (constants).
    """
    a1, b1 = (_as_tensor(v) for v in c1)
    b2 = _as_tensor(c2[1], like=a1)
    pos = ops.l2_norm(ops.sub(a1, b1))
    negd = ops.l2_norm(ops.sub(a1, b2))
    loss = ops.add_scalar(ops.sub(pos, negd), alpha)
    if clamp:
        loss = ops.relu(loss)
    return loss


def _as_tensor(v, like: Tensor | None = None) -> Tensor:
    if isinstance(v, Tensor):
        return v
    dtype = like.dtype if like is not None else np.asarray(v).dtype
    return Tensor(np.asarray(v), dtype=dtype if dtype in (np.float32, np.float64) else np.float32)


def mcm_loss(batch_classes: Sequence[str], mem: ConsensusMemory, live: Mapping[str, tuple]) -> Tensor:
    """Mean of the triplet loss over all ordered pairs of batch classes.

    Anchor and positive are the live halves of class i; the negative is the
    memory B-half of class j. A class paired with itself contributes exactly
    the margin (its terms cancel) and no gradient.
    """
    n = len(batch_classes)
    if n == 0:
        raise MemoryContractError("mcm_loss needs at least one class")
    for cid in batch_classes:
        if cid not in live:
            raise MemoryContractError(f"class {cid!r} has no live consensus pair")
        if cid not in mem:
            raise MemoryContractError(f"class {cid!r} not in memory; update memory before computing the loss")
    like = live[batch_classes[0]][0]
    total = None
    n_diag = 0
    for ci in batch_classes:
        for cj in batch_classes:
            if ci == cj:
                n_diag += 1
                continue
            negative = (None, mem.get(cj)[1].astype(like.dtype))
            term = triplet_loss(live[ci], negative, mem.alpha, mem.clamp)
            total = term if total is None else ops.add(total, term)
    diag = n_diag * mem.alpha
    if total is None:
        return Tensor(np.asarray(diag / (n * n)), dtype=like.dtype)
    return ops.scale(ops.add_scalar(total, diag), 1.0 / (n * n))
