"""Pixel- and region-level supervision and the weighted generator objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

from mccl import ops
from mccl.tensor import ShapeError, Tensor

PROB_EPS = 1e-7
IOU_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    bce: float = 30.0
    iou: float = 0.5
    mcm: float = 3.0
    adv: float = 10.0
    disc: float = 3.0

    def __post_init__(self):
        for name in ("bce", "iou", "mcm", "adv", "disc"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


def bce_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean binary cross-entropy; ``pred`` is clamped to [1e-7, 1 - 1e-7]."""
    if pred.shape != gt.shape:
        raise ShapeError(f"bce_loss: prediction {pred.shape} vs target {gt.shape}")
    p = ops.clamp(pred, PROB_EPS, 1 - PROB_EPS)
    y = gt.detach()
    pos = ops.mul(y, ops.log(p))
    negs = ops.mul(ops.add_scalar(ops.neg(y), 1.0), ops.log(ops.add_scalar(ops.neg(p), 1.0)))
    return ops.neg(ops.mean(ops.add(pos, negs)))


def iou_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """One minus the batch-mean soft IoU of B x 1 x H x W maps."""
    if pred.shape != gt.shape:
        raise ShapeError(f"iou_loss: prediction {pred.shape} vs target {gt.shape}")
    B = pred.shape[0]
    y = gt.detach()
    p = ops.reshape(pred, (B, -1))
    y = ops.reshape(y, (B, -1))
    inter = ops.sum(ops.mul(p, y), axis=1)
    union = ops.add_scalar(ops.sub(ops.add(ops.sum(p, axis=1), ops.sum(y, axis=1)), inter), IOU_EPS)
    return ops.add_scalar(ops.neg(ops.mean(ops.div(inter, union))), 1.0)


class NonFiniteLoss(FloatingPointError):
    pass


def total_generator_loss(bce, iou, mcm, adv, w: LossWeights = LossWeights()) -> Tensor:
    """Weighted sum of the four generator terms.

    Terms may be Tensors or floats; a ``None`` term (module disabled) is skipped,
    as is any term whose weight is exactly zero.
    """
    parts = (("bce", bce, w.bce), ("iou", iou, w.iou), ("mcm", mcm, w.mcm), ("adv", adv, w.adv))
    total = None
    for name, term, weight in parts:
        if term is None:
            continue
        value = term.item() if isinstance(term, Tensor) else float(term)
        if not math.isfinite(value):
            raise NonFiniteLoss(f"generator loss component {name} is not finite ({value})")
        if weight == 0:
            continue
        t = term if isinstance(term, Tensor) else Tensor(value)
        scaled = ops.scale(t, weight)
        total = scaled if total is None else ops.add(total, scaled)
    if total is None:
        ref = next((t for _, t, _ in parts if isinstance(t, Tensor)), None)
        return Tensor(0.0, dtype=ref.dtype if ref is not None else None)
    return total
