"""Encoder, laterals, decoder, prediction head, parameter store and checkpoint format."""

import numpy as np
import pytest

from mccl import ops
from mccl.checkpoint import CheckpointError, decode_state, encode_state, inference_state, load_checkpoint, save_checkpoint
from mccl.model import (
    ModelConfig,
    build_params,
    config_from_params,
    decode,
    encode,
    forward,
    lateral_project,
    predict_maps,
    probabilities,
)
from mccl.tensor import ShapeError, Tape, Tensor, backward

from test_ops import bilinear_oracle, naive_conv


@pytest.fixture(scope="module")
def ps():
    return build_params(ModelConfig(), seed=0)


def rand_images(n, size=64, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=(n, 3, size, size)).astype(np.float32))


def zero_params(ps):
    for t in ps.params.values():
        t.data[...] = 0
    return ps


def test_encoder_stage_shapes(ps):
    feats = encode(rand_images(4), ps, training=False)
    assert [f.shape for f in feats.stages] == [(4, 24, 16, 16), (4, 48, 8, 8), (4, 96, 4, 4), (4, 192, 2, 2)]


def test_encoder_rejects_indivisible_size(ps):
    with pytest.raises(ShapeError):
        encode(rand_images(1, size=48), ps)


def test_zero_input_zero_bias_gives_zero_features():
    p = build_params(ModelConfig(), seed=3)
    for name, t in p.params.items():
        if name.endswith("/b") or name.endswith("/beta"):
            t.data[...] = 0
    feats = encode(Tensor(np.zeros((2, 3, 64, 64), dtype=np.float32)), p, training=False)
    for f in feats.stages:
        assert not f.data.any()


def test_encoder_is_deterministic():
    a = encode(rand_images(2, seed=5), build_params(seed=9), training=False)
    b = encode(rand_images(2, seed=5), build_params(seed=9), training=False)
    for x, y in zip(a.stages, b.stages):
        np.testing.assert_array_equal(x.data, y.data)


def test_lateral_identity_zero_and_conv_oracle(ps):
    f = Tensor(np.random.default_rng(1).normal(size=(2, 24, 4, 4)).astype(np.float32))
    w, b = ps["lat/1/w"], ps["lat/1/b"]
    saved = w.data.copy(), b.data.copy()
    try:
        got = lateral_project(f, ps, 1).data
        np.testing.assert_allclose(got, naive_conv(f.data.astype(np.float64), saved[0].astype(np.float64),
                                                   saved[1].astype(np.float64), 1, 0), atol=1e-4)
        w.data[...] = 0
        b.data[...] = 0
        assert not lateral_project(f, ps, 1).data.any()
        if w.shape[0] == w.shape[1]:
            w.data[...] = np.eye(w.shape[0]).reshape(w.shape)
            np.testing.assert_allclose(lateral_project(f, ps, 1).data, f.data)
    finally:
        w.data[...], b.data[...] = saved


def test_identity_lateral_when_channels_match():
    ps = build_params(ModelConfig(channels=(8, 8, 8, 8)), seed=0)
    w, b = ps["lat/2/w"], ps["lat/2/b"]
    w.data[...] = np.eye(8).reshape(8, 8, 1, 1)
    b.data[...] = 0
    f = Tensor(np.random.default_rng(2).normal(size=(1, 8, 3, 3)).astype(np.float32))
    np.testing.assert_array_equal(lateral_project(f, ps, 2).data, f.data)


def test_forward_logit_shape(ps):
    res = forward(rand_images(4), ["a", "b"], [2, 2], ps, ModelConfig(), training=False)
    assert res.logits.shape == (4, 1, 64, 64)
    res = forward(rand_images(2, size=96), ["a"], [2], ps, ModelConfig(), training=False)
    assert res.logits.shape == (2, 1, 96, 96)


def test_forward_group_sizes_must_cover_batch(ps):
    with pytest.raises(ShapeError):
        forward(rand_images(4), ["a"], [3], ps, ModelConfig())


def test_all_zero_params_give_zero_logits():
    p = zero_params(build_params(seed=0))
    res = forward(rand_images(2), ["a"], [2], p, ModelConfig(), training=False)
    assert not res.logits.data.any()


def test_zeroed_laterals_still_decode(ps):
    p = build_params(seed=4)
    for i in (1, 2, 3):
        p[f"lat/{i}/w"].data[...] = 0
        p[f"lat/{i}/b"].data[...] = 0
    res = forward(rand_images(2), ["a"], [2], p, ModelConfig(), training=False)
    assert res.logits.shape == (2, 1, 64, 64)
    assert np.all(np.isfinite(res.logits.data))


def test_gradient_reaches_first_encoder_conv():
    p = build_params(seed=0)
    with Tape() as tape:
        res = forward(rand_images(4), ["a", "b"], [2, 2], p, ModelConfig(), training=True, seeds=[1, 2])
        loss = ops.mean(res.logits)
    backward(loss, tape)
    g = p["enc/s1/down/w"].grad
    assert g is not None and np.abs(g).sum() > 0


def test_probabilities_of_zero_and_huge_logits():
    out = probabilities(Tensor(np.array([[[[0.0, 1e4, -1e4]]]], dtype=np.float32))).data.ravel()
    assert out[0] == 0.5
    assert out[1] <= 1 - 1e-7 + 1e-12
    assert out[2] >= 1e-7 - 1e-12


def test_predict_maps_resize_oracle():
    logits = np.random.default_rng(3).normal(size=(1, 1, 64, 64))
    maps = predict_maps(Tensor(logits), [(100, 80)])
    probs = np.clip(1 / (1 + np.exp(-logits[0, 0])), 1e-7, 1 - 1e-7)
    np.testing.assert_allclose(maps[0], bilinear_oracle(probs, 100, 80), atol=1e-10)


def test_without_gcam_consensus_is_top_feature():
    cfg = ModelConfig(use_gcam=False)
    p = build_params(cfg, seed=0)
    assert not any(k.startswith("gcam/") for k in p.params)
    res = forward(rand_images(4), ["a", "b"], [2, 2], p, cfg, training=True, seeds=[0, 1])
    assert res.logits.shape == (4, 1, 64, 64)
    assert res.consensus[0].vec_a.shape == (192,)


def test_config_recovered_from_params():
    for cfg in (ModelConfig(), ModelConfig(channels=(4, 8, 8, 16), use_gcam=False)):
        assert config_from_params(build_params(cfg, seed=0)) == cfg


# ---------------------------------------------------------------------------
# parameter store

def test_param_init_is_seeded_and_bounded():
    a, b, c = build_params(seed=1), build_params(seed=1), build_params(seed=2)
    for name in a.params:
        np.testing.assert_array_equal(a[name].data, b[name].data)
    assert any(not np.array_equal(a[n].data, c[n].data) for n in a.params)
    w = a["enc/s2/down/w"].data
    assert np.abs(w).max() <= 1 / np.sqrt(24 * 4 * 4)


def test_load_state_strict_reports_missing():
    p = build_params(seed=0)
    state = dict(p.state())
    state.pop("dec/head/w")
    with pytest.raises(KeyError, match="dec/head/w"):
        build_params(seed=1).load_state(state)


# ---------------------------------------------------------------------------
# checkpoint

def test_checkpoint_layout_frozen_bytes():
    buf = encode_state({"b": np.array([1.0], np.float32), "a": np.zeros((2, 1), np.float32)})
    assert buf[:4] == b"MCCL"
    expect = (b"MCCL" + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
              + (1).to_bytes(4, "little") + b"a" + (2).to_bytes(4, "little") + (2).to_bytes(4, "little")
              + (1).to_bytes(4, "little") + bytes(8)
              + (1).to_bytes(4, "little") + b"b" + (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
              + np.float32(1.0).tobytes())
    assert buf == expect


def test_checkpoint_roundtrip_is_byte_identical(tmp_path):
    state = build_params(seed=0).state()
    path = save_checkpoint(tmp_path / "c.mccl", state)
    loaded = load_checkpoint(path)
    assert list(loaded) == sorted(state)
    for k in state:
        np.testing.assert_array_equal(loaded[k], state[k])
    assert encode_state(loaded) == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError, match="magic"):
        decode_state(b"XXXX" + bytes(8))
    good = encode_state({"a": np.ones(3, np.float32)})
    with pytest.raises(CheckpointError, match="truncated"):
        decode_state(good[:-2])
    with pytest.raises(CheckpointError, match="trailing"):
        decode_state(good + b"\0")
    with pytest.raises(CheckpointError, match="does not exist"):
        load_checkpoint(tmp_path / "missing.mccl")


def test_inference_state_drops_training_tensors():
    state = {"enc/x": np.zeros(1), "mcm/00/A": np.zeros(1), "disc/b1/conv/w": np.zeros(1)}
    assert list(inference_state(state)) == ["enc/x"]
