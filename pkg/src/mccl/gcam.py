"""Group consensus aggregation.

Within one image group the encoder features are split into two shuffled
halves, passed jointly through a cross-image non-local block, restored to
their original order and fused with the input by depth-wise correlation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from mccl import ops
from mccl.nn import ParamStore, conv
from mccl.tensor import Tensor


class GroupSizeError(ValueError):
    pass


@dataclass
class GroupFeature:
    class_id: str
    feat: Tensor  # S x C x H x W


@dataclass
class GroupConsensus:
    class_id: str
    feat_out: Tensor  # S x 2C x H x W
    vec_a: Optional[Tensor]  # 2C
    vec_b: Optional[Tensor]
    perm: np.ndarray


def add_gcam_params(ps: ParamStore, channels: int, prefix: str = "gcam") -> None:
    inner = max(channels // 2, 1)
    for proj in ("query", "key", "value"):
        ps.add_conv(f"{prefix}/{proj}", channels, inner, 1)
    ps.add_conv(f"{prefix}/out", inner, channels, 1, bias=False)


def shuffle_permutation(n: int, seed: Optional[int]) -> np.ndarray:
    """Seeded permutation of ``n`` images; ``seed=None`` gives the identity."""
    if seed is None:
        return np.arange(n)
    return np.random.default_rng(seed).permutation(n)


def split_shuffle(g: GroupFeature, seed: Optional[int]) -> tuple[Tensor, Tensor]:
    S = g.feat.shape[0]
    if S % 2:
        raise GroupSizeError(f"group {g.class_id!r} has {S} images; an even count is required to split")
    perm = shuffle_permutation(S, seed)
    A = ops.take(g.feat, perm[: S // 2])
    B = ops.take(g.feat, perm[S // 2:])
    return A, B


def _flatten_positions(t: Tensor) -> Tensor:
    S, C, H, W = t.shape
    return ops.reshape(ops.transpose(t, (0, 2, 3, 1)), (S * H * W, C))


def nonlocal_block(x: Tensor, ps: ParamStore, prefix: str = "gcam") -> tuple[Tensor, Tensor]:
    """Cross-image non-local attention over every position of every image in ``x``.

    Returns the residual output and the (positions x positions) affinity.
    """
    S, C, H, W = x.shape
    q = _flatten_positions(conv(ps, f"{prefix}/query", x))
    k = _flatten_positions(conv(ps, f"{prefix}/key", x))
    v = _flatten_positions(conv(ps, f"{prefix}/value", x))
    aff = ops.softmax(ops.matmul(q, ops.transpose(k, (1, 0))), axis=1)
    y = ops.matmul(aff, v)
    d = y.shape[1]
    y = ops.transpose(ops.reshape(y, (S, H, W, d)), (0, 3, 1, 2))
    return ops.add(x, conv(ps, f"{prefix}/out", y)), aff


def nonlocal_consensus(A: Tensor, B: Tensor, ps: ParamStore, prefix: str = "gcam") -> tuple[Tensor, Tensor]:
    if A.shape != B.shape:
        raise ValueError(f"halves differ in shape: {A.shape} vs {B.shape}")
    y, _ = nonlocal_block(ops.concat([A, B], axis=0), ps, prefix)
    half = A.shape[0]
    return ops.slice_axis(y, 0, half), ops.slice_axis(y, half, 2 * half)


def depthwise_fuse(orig: Tensor, cons: Tensor) -> Tensor:
    """Correlate ``orig`` with the pooled consensus kernel and append ``cons``."""
    if orig.shape != cons.shape:
        raise ValueError(f"depthwise_fuse: {orig.shape} vs {cons.shape}")
    C = cons.shape[1]
    kernel = ops.reshape(ops.mean(ops.global_avg_pool(cons), axis=0), (C, 1, 1))
    fused = ops.depthwise_conv2d(orig, kernel)
    return ops.concat([fused, cons], axis=1)


def pooled_vector(feat: Tensor, index: np.ndarray) -> Tensor:
    """Mean over the selected images and all positions -> channel vector."""
    return ops.mean(ops.global_avg_pool(ops.take(feat, index)), axis=0)


def gcam_forward(g: GroupFeature, ps: ParamStore, seed: Optional[int], training: bool = True,
                 prefix: str = "gcam") -> GroupConsensus:
    """Consensus features for one group.

    In training the group is split into shuffled halves A/B whose pooled
    outputs become the contrastive vectors. At inference no split is needed
    (the attention is order-equivariant), so odd group sizes are accepted and
    no vectors are produced.
    """
    S = g.feat.shape[0]
    if training:
        A, B = split_shuffle(g, seed)
        perm = shuffle_permutation(S, seed)
        A2, B2 = nonlocal_consensus(A, B, ps, prefix)
        cons = ops.take(ops.concat([A2, B2], axis=0), np.argsort(perm))
    else:
        perm = np.arange(S)
        cons, _ = nonlocal_block(g.feat, ps, prefix)
    out = depthwise_fuse(g.feat, cons)
    if not training:
        return GroupConsensus(g.class_id, out, None, None, perm)
    vec_a = pooled_vector(out, perm[: S // 2])
    vec_b = pooled_vector(out, perm[S // 2:])
    return GroupConsensus(g.class_id, out, vec_a, vec_b, perm)
