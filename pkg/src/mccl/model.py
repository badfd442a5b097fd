"""Encoder / lateral / decoder skeleton and the full co-saliency generator."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from mccl import ops
from mccl.gcam import (
    GroupConsensus,
    GroupFeature,
    add_gcam_params,
    gcam_forward,
    pooled_vector,
    shuffle_permutation,
)
from mccl.nn import ParamStore, add_residual_block, bn, conv, residual_block
from mccl.tensor import ShapeError, Tensor, suspend

PROB_EPS = 1e-7


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple = (24, 48, 96, 192)
    use_gcam: bool = True

    @property
    def consensus_channels(self) -> int:
        return 2 * self.channels[-1] if self.use_gcam else self.channels[-1]


@dataclass
class EncoderFeatures:
    """Stage outputs at 1/4, 1/8, 1/16 and 1/32 of the input resolution."""

    stages: list

    @property
    def lateral(self) -> list:
        return self.stages[:3]

    @property
    def final(self) -> Tensor:
        return self.stages[3]


def build_params(cfg: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32) -> ParamStore:
    c = cfg.channels
    if len(c) != 4:
        raise ValueError(f"channel ladder needs 4 entries, got {c}")
    ps = ParamStore(seed=seed, dtype=dtype)
    cin = 3
    for i, ch in enumerate(c, start=1):
        ps.add_conv(f"enc/s{i}/down", cin, ch, 4, bias=False)
        ps.add_bn(f"enc/s{i}/bn", ch)
        add_residual_block(ps, f"enc/s{i}/res", ch, ch)
        cin = ch
    for i in range(1, 4):
        ps.add_conv(f"lat/{i}", c[i - 1], c[i - 1], 1)
    if cfg.use_gcam:
        add_gcam_params(ps, c[3])
    dec_in = cfg.consensus_channels
    for blk, ch in zip((1, 2, 3, 4), (c[2], c[1], c[0], c[0])):
        add_residual_block(ps, f"dec/blk{blk}", dec_in, ch)
        dec_in = ch
    ps.add_conv("dec/head", c[0], 1, 1)
    return ps


def config_from_params(ps_or_state) -> ModelConfig:
    """Recover the channel ladder and GCAM flag from parameter shapes."""
    state = ps_or_state.state() if isinstance(ps_or_state, ParamStore) else ps_or_state
    channels = tuple(int(state[f"enc/s{i}/down/w"].shape[0]) for i in range(1, 5))
    return ModelConfig(channels=channels, use_gcam="gcam/query/w" in state)


def encode(images: Tensor, ps: ParamStore, training: bool = False) -> EncoderFeatures:
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeError(f"encode expects B x 3 x H x W images, got {images.shape}")
    H, W = images.shape[2:]
    if H % 32 or W % 32:
        raise ShapeError(f"image size {H}x{W} is not divisible by 32")
    x = images
    stages = []
    for i in range(1, 5):
        stride, pad = (4, 0) if i == 1 else (2, 1)
        x = conv(ps, f"enc/s{i}/down", x, stride=stride, pad=pad)
        x = ops.relu(bn(ps, f"enc/s{i}/bn", x, training))
        x = residual_block(ps, f"enc/s{i}/res", x, training)
        stages.append(x)
    return EncoderFeatures(stages)


def lateral_project(f: Tensor, ps: ParamStore, stage: int) -> Tensor:
    if stage not in (1, 2, 3):
        raise ValueError(f"lateral stage must be 1, 2 or 3, got {stage}")
    return conv(ps, f"lat/{stage}", f)


def decode(consensus: Tensor, feats: EncoderFeatures, ps: ParamStore, training: bool = False,
           out_size: Optional[tuple] = None) -> Tensor:
    """Four residual blocks; the first three are followed by 2x upsampling and a lateral add."""
    x = consensus
    for blk, stage in ((1, 3), (2, 2), (3, 1)):
        x = residual_block(ps, f"dec/blk{blk}", x, training)
        h, w = x.shape[2:]
        x = ops.bilinear_resize(x, 2 * h, 2 * w)
        lat = lateral_project(feats.stages[stage - 1], ps, stage)
        if lat.shape != x.shape:
            raise ShapeError(f"lateral {stage} has shape {lat.shape}, decoder path has {x.shape}")
        x = ops.add(x, lat)
    x = residual_block(ps, "dec/blk4", x, training)
    logits = conv(ps, "dec/head", x)
    h, w = logits.shape[2:]
    oh, ow = out_size if out_size is not None else (4 * h, 4 * w)
    return ops.bilinear_resize(logits, oh, ow)


def probabilities(logits: Tensor) -> Tensor:
    return ops.clamp(ops.sigmoid(logits), PROB_EPS, 1 - PROB_EPS)


def predict_maps(logits: Tensor, orig_sizes: Sequence[tuple]) -> list[np.ndarray]:
    """Sigmoid, clamp and resize each logit map to its original (h, w)."""
    if len(orig_sizes) != logits.shape[0]:
        raise ValueError(f"{len(orig_sizes)} sizes for a batch of {logits.shape[0]}")
    with suspend():
        probs = probabilities(logits)
        maps = []
        for i, (h, w) in enumerate(orig_sizes):
            one = ops.slice_axis(probs, i, i + 1)
            maps.append(ops.bilinear_resize(one, int(h), int(w)).data[0, 0].copy())
    return maps


@dataclass
class ForwardResult:
    logits: Tensor
    consensus: list = field(default_factory=list)  # GroupConsensus per group
    features: Optional[EncoderFeatures] = None


def forward(images: Tensor, group_ids: Sequence[str], group_sizes: Sequence[int], ps: ParamStore,
            cfg: ModelConfig, training: bool = False, seeds: Optional[Sequence[Optional[int]]] = None) -> ForwardResult:
    """Full generator pass over a batch made of consecutive image groups.

    Encodes all images jointly, splits the top feature by group, runs the
    consensus module group by group, re-concatenates and decodes.
    """
    if sum(group_sizes) != images.shape[0]:
        raise ShapeError(f"group sizes {list(group_sizes)} do not cover a batch of {images.shape[0]}")
    feats = encode(images, ps, training)
    seeds = list(seeds) if seeds is not None else [None] * len(group_sizes)
    parts = ops.split(feats.final, list(group_sizes), axis=0)
    if cfg.use_gcam:
        results: list[GroupConsensus] = [
            gcam_forward(GroupFeature(cid, part), ps, seed, training=training)
            for cid, part, seed in zip(group_ids, parts, seeds)
        ]
        top = results[0].feat_out if len(results) == 1 else ops.concat([r.feat_out for r in results], axis=0)
    else:
        # without GCAM the contrastive vectors come from the raw top features
        results = []
        if training:
            for cid, part, seed in zip(group_ids, parts, seeds):
                perm = shuffle_permutation(part.shape[0], seed)
                half = part.shape[0] // 2
                results.append(GroupConsensus(cid, part, pooled_vector(part, perm[:half]),
                                              pooled_vector(part, perm[half:]), perm))
        top = feats.final
    logits = decode(top, feats, ps, training, out_size=images.shape[2:])
    return ForwardResult(logits, results, feats)
