"""Adversarial integrity learning: masked-image discriminator and its objectives."""

from __future__ import annotations

import numpy as np

from mccl import ops
from mccl.losses import PROB_EPS
from mccl.nn import ParamStore, bn, conv
from mccl.tensor import ShapeError, Tensor

DISC_CHANNELS = (16, 32, 64, 128)


def build_discriminator(seed: int = 0, channels=DISC_CHANNELS, dtype=np.float32) -> ParamStore:
    ps = ParamStore(seed=seed, dtype=dtype)
    cin = 3
    for i, ch in enumerate(channels, start=1):
        ps.add_conv(f"disc/b{i}/conv", cin, ch, 4)
        if i > 1:
            ps.add_bn(f"disc/b{i}/bn", ch)
        cin = ch
    ps.uniform("disc/head/w", (cin, 1), cin)
    ps.constant("disc/head/b", (1,), 0.0)
    return ps


def mask_images(source: Tensor, maps: Tensor) -> Tensor:
    """Pixel-wise product of B x 3 x H x W images with B x 1 x H x W maps."""
    if source.ndim != 4 or maps.ndim != 4 or maps.shape[1] != 1 or source.shape[0] != maps.shape[0] \
            or source.shape[2:] != maps.shape[2:]:
        raise ShapeError(f"mask_images: images {source.shape} vs maps {maps.shape}")
    m3 = ops.concat([maps] * source.shape[1], axis=1)
    return ops.mul(source, m3)


def discriminator_forward(x: Tensor, ps: ParamStore, training: bool = True, update_stats: bool = True) -> Tensor:
    """Probability (B,) that each masked image was produced by a ground-truth map."""
    H, W = x.shape[2:]
    if H % 16 or W % 16:
        raise ShapeError(f"discriminator input {H}x{W} is not divisible by 16")
    i = 1
    while f"disc/b{i}/conv/w" in ps.params:
        x = conv(ps, f"disc/b{i}/conv", x, stride=2, pad=1)
        if f"disc/b{i}/bn/gamma" in ps.params:
            x = bn(ps, f"disc/b{i}/bn", x, training, update_stats=update_stats)
        x = ops.leaky_relu(x, 0.2)
        i += 1
    logit = ops.linear(ops.global_avg_pool(x), ps["disc/head/w"], ps["disc/head/b"])
    prob = ops.sigmoid(ops.reshape(logit, (x.shape[0],)))
    return ops.clamp(prob, PROB_EPS, 1 - PROB_EPS)


def bce_against(prob: Tensor, label: float) -> Tensor:
    """Mean BCE of probabilities against a constant 0/1 label."""
    if label == 1:
        return ops.neg(ops.mean(ops.log(prob)))
    if label == 0:
        return ops.neg(ops.mean(ops.log(ops.add_scalar(ops.neg(prob), 1.0))))
    raise ValueError(f"label must be 0 or 1, got {label}")


def score_pair(source: Tensor, gt_maps: Tensor, pred_maps: Tensor, disc: ParamStore,
               update_stats: bool = True) -> tuple[Tensor, Tensor]:
    """Discriminator outputs for ground-truth-masked and prediction-masked images.

    The two halves are scored in separate passes, each with its own batch statistics.
    """
    real = discriminator_forward(mask_images(source, gt_maps), disc, training=True, update_stats=update_stats)
    fake = discriminator_forward(mask_images(source, pred_maps), disc, training=True, update_stats=update_stats)
    return real, fake


def adv_generator_loss(pred_maps: Tensor, source: Tensor, disc: ParamStore) -> Tensor:
    """Non-saturating generator loss: prediction-masked images should look real.

    ``disc`` should be a frozen view so the discriminator receives no update;
    its batch-norm running statistics are left untouched.
    """
    t_hat = discriminator_forward(mask_images(source.detach(), pred_maps), disc, training=True, update_stats=False)
    return bce_against(t_hat, 1)


def disc_loss(pred_maps: Tensor, gt_maps: Tensor, source: Tensor, disc: ParamStore,
              weight: float = 3.0) -> Tensor:
    """``weight`` times the average of the real-term and fake-term BCE.

    Predictions and ground truth enter detached, so nothing flows back into the generator.
    """
    real, fake = score_pair(source.detach(), gt_maps.detach(), pred_maps.detach(), disc)
    both = ops.add(bce_against(real, 1), bce_against(fake, 0))
    return ops.scale(both, 0.5 * weight)


def disc_accuracy(pred_maps: Tensor, gt_maps: Tensor, source: Tensor, disc: ParamStore) -> float:
    """Real-vs-fake accuracy at the 0.5 threshold."""
    real, fake = score_pair(source, gt_maps, pred_maps, disc.frozen(), update_stats=False)
    return float(((real.data > 0.5).sum() + (fake.data <= 0.5).sum()) / (real.data.size + fake.data.size))
