"""Optimizer, schedule, training loop, inference round trips and the command line."""

import math

import numpy as np
import pytest

from mccl.checkpoint import CheckpointError, inference_state, load_checkpoint, save_checkpoint
from mccl.cli import build_train_config, main, read_config, UsageError
from mccl.data import load_dataset, dataset_roots, make_batch, read_gray, synth_generate
from mccl.optim import AdamW, clip_grad_norm
from mccl.tensor import Tensor
from mccl.train import (
    TrainConfig,
    TrainState,
    gan_step,
    infer,
    load_inference_model,
    log_columns,
    read_log,
    train,
    train_on_groups,
)

SMALL = dict(image_size=32, channels=(4, 8, 8, 16), group_cap=4)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    synth_generate(4, 4, 32, 3, root)
    return root


@pytest.fixture(scope="module")
def tiny_groups(tiny_data):
    return load_dataset(*dataset_roots(tiny_data), 32)


@pytest.fixture(scope="module")
def trained(tiny_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = TrainConfig(epochs=2, **SMALL)
    return train(cfg, tiny_data, out), out


# ---------------------------------------------------------------------------
# optimizer

def adamw_reference(w, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=1e-2):
    """Scalar loop transcription of the decoupled-decay update."""
    w = [float(x) for x in w]
    m = [0.0] * len(w)
    v = [0.0] * len(w)
    for t, g in enumerate(grads, 1):
        for i in range(len(w)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            w[i] = w[i] * (1 - lr * wd) - lr * mh / (math.sqrt(vh) + eps)
    return w


def test_adamw_matches_hand_iteration():
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=5)
    grads = [rng.normal(size=5) for _ in range(4)]
    p = Tensor(w0.copy(), requires_grad=True, dtype=np.float64)
    opt = AdamW([p], lr=1e-2)
    for g in grads:
        p.grad = g.copy()
        assert opt.step()
    np.testing.assert_allclose(p.data, adamw_reference(w0, grads, 1e-2), atol=1e-7)


def test_zero_gradient_only_decays():
    p = Tensor(np.array([2.0, -4.0]), requires_grad=True, dtype=np.float64)
    opt = AdamW([p], lr=0.1, weight_decay=0.5)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_allclose(p.data, [2.0 * 0.95, -4.0 * 0.95], atol=1e-12)


def test_zero_gradient_without_decay_is_a_no_op():
    p = Tensor(np.array([1.5, -0.5]), requires_grad=True, dtype=np.float64)
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.5, -0.5])


def test_non_finite_gradient_skips_step():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=np.float64)
    opt = AdamW([p], lr=0.1)
    p.grad = np.array([np.nan, 1.0])
    assert opt.step() is False
    assert opt.skipped == 1 and opt.t == 0
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), requires_grad=True, dtype=np.float64)
    b = Tensor(np.zeros(1), requires_grad=True, dtype=np.float64)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8], atol=1e-9)
    a.grad, b.grad = np.array([0.3, 0.0]), np.array([0.4])
    clip_grad_norm([a, b], 1.0)
    np.testing.assert_array_equal(a.grad, [0.3, 0.0])


# ---------------------------------------------------------------------------
# configuration and schedule

def test_default_hyperparameters():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.beta, cfg.alpha) == (1e-4, 0.1, 0.1)
    assert (cfg.lambda1, cfg.lambda2, cfg.lambda3, cfg.lambda4, cfg.lambda5) == (30, 0.5, 3, 10, 3)
    assert cfg.lr_drop_epochs_from_end == 20


def test_lr_drops_for_final_epochs():
    cfg = TrainConfig(epochs=50, lr_drop_epochs_from_end=20)
    assert cfg.lr_at(1) == cfg.lr_at(30) == 1e-4
    assert cfg.lr_at(31) == cfg.lr_at(50) == pytest.approx(1e-5)


def test_image_size_must_divide_by_32():
    with pytest.raises(ValueError):
        TrainConfig(image_size=48)


def test_log_columns_follow_enabled_modules():
    assert log_columns(TrainConfig()) == ["epoch", "L_BCE", "L_IoU", "L_MCM", "L_adv", "L_disc", "L_sal"]
    assert log_columns(TrainConfig(enable_mcm=False, enable_ail=False)) == ["epoch", "L_BCE", "L_IoU", "L_sal"]


# ---------------------------------------------------------------------------
# training steps

def one_step(cfg, groups):
    state = TrainState.create(cfg)
    batch = make_batch(groups, 2, cfg.group_cap, 0, classes=[0, 1])
    parts, disc = gan_step(state, batch, cfg.lr, [5, 6])
    return state, parts, disc


def test_adversarial_weight_zero_matches_no_adversary(tiny_groups):
    a, pa, _ = one_step(TrainConfig(lambda4=0.0, **SMALL), tiny_groups)
    b, pb, _ = one_step(TrainConfig(enable_ail=False, **SMALL), tiny_groups)
    for k, v in b.params.state().items():
        np.testing.assert_array_equal(a.params.state()[k], v, err_msg=k)
    assert pa["L_BCE"] == pb["L_BCE"] and pa["L_sal"] == pb["L_sal"]


def test_step_updates_generator_and_discriminator(tiny_groups):
    cfg = TrainConfig(**SMALL)
    fresh = TrainState.create(cfg)
    state, parts, disc = one_step(cfg, tiny_groups)
    assert disc is not None and math.isfinite(disc)
    assert set(parts) == {"L_BCE", "L_IoU", "L_MCM", "L_adv", "L_sal"}
    assert any(not np.array_equal(v, state.params.state()[k]) for k, v in fresh.params.state().items())
    assert any(not np.array_equal(v, state.disc.state()[k]) for k, v in fresh.disc.state().items())
    assert len(state.memory) == 2


def test_normalized_consensus_lands_on_unit_sphere(tiny_groups):
    state, parts, _ = one_step(TrainConfig(mcm_normalize=True, enable_ail=False, **SMALL), tiny_groups)
    for a, b in state.memory.entries.values():
        assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-6)
        assert np.linalg.norm(b) == pytest.approx(1.0, abs=1e-6)
    # triplet distances between unit vectors are bounded by 2
    assert -2 + 0.1 - 1e-6 <= parts["L_MCM"] <= 2 + 0.1 + 1e-6


def test_too_few_classes_rejected(tiny_groups):
    with pytest.raises(Exception, match="cannot fill"):
        train_on_groups(TrainConfig(epochs=1, n_groups_per_batch=5, **SMALL), tiny_groups)


def test_smoke_run_writes_checkpoint_and_log(trained):
    result, out = trained
    assert (out / "checkpoint.mccl").exists()
    rows = read_log(out / "train_log.tsv")
    assert [r["epoch"] for r in rows] == [1, 2]
    assert all(math.isfinite(v) for r in rows for v in r.values())
    state = load_checkpoint(out / "checkpoint.mccl")
    assert any(k.startswith("mcm/") for k in state) and any(k.startswith("disc/") for k in state)
    ps, mc = load_inference_model(out / "checkpoint.mccl")
    assert mc.channels == SMALL["channels"]


def test_log_without_mcm_and_ail(tiny_groups, tmp_path):
    train_on_groups(TrainConfig(epochs=1, enable_mcm=False, enable_ail=False, **SMALL), tiny_groups, tmp_path)
    header = [ln for ln in (tmp_path / "train_log.tsv").read_text().splitlines() if not ln.startswith("#")][0]
    assert header.split("\t") == ["epoch", "L_BCE", "L_IoU", "L_sal"]


def test_training_is_deterministic(tiny_groups, tmp_path):
    cfg = TrainConfig(epochs=1, **SMALL)
    a = train_on_groups(cfg, tiny_groups, tmp_path / "a")
    b = train_on_groups(cfg, tiny_groups, tmp_path / "b")
    assert (tmp_path / "a" / "checkpoint.mccl").read_bytes() == (tmp_path / "b" / "checkpoint.mccl").read_bytes()
    assert a.log == b.log


# ---------------------------------------------------------------------------
# inference

def test_infer_writes_one_map_per_image(trained, tiny_data, tmp_path):
    _, out = trained
    written = infer(out / "checkpoint.mccl", tiny_data, tmp_path / "pred", 32)
    assert len(written) == 16
    m = read_gray(written[0])
    assert m.shape == (32, 32) and 0 <= m.min() and m.max() <= 1


def test_infer_is_repeatable(trained, tiny_data, tmp_path):
    _, out = trained
    a = infer(out / "checkpoint.mccl", tiny_data, tmp_path / "a", 32)
    b = infer(out / "checkpoint.mccl", tiny_data, tmp_path / "b", 32)
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]


def test_stripped_checkpoint_gives_identical_maps(trained, tiny_data, tmp_path):
    _, out = trained
    stripped = save_checkpoint(tmp_path / "gen.mccl", inference_state(load_checkpoint(out / "checkpoint.mccl")))
    a = infer(out / "checkpoint.mccl", tiny_data, tmp_path / "a", 32)
    b = infer(stripped, tiny_data, tmp_path / "b", 32)
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]


def test_missing_tensor_is_named(trained, tmp_path):
    _, out = trained
    state = inference_state(load_checkpoint(out / "checkpoint.mccl"))
    victim = next(k for k in state if k.startswith("dec/"))
    del state[victim]
    broken = save_checkpoint(tmp_path / "broken.mccl", state)
    with pytest.raises(CheckpointError, match=victim):
        load_inference_model(broken)


# ---------------------------------------------------------------------------
# command line

def test_cli_synth_train_infer_eval(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["synth", "--groups", "2", "--per-group", "2", "--size", "32", "--seed", "1", "--out", str(data)]) == 0
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "run"), "--epochs", "1", "--image-size", "32",
                 "--channels", "4,8,8,16", "--enable-ail", "false"]) == 0
    assert main(["infer", "--checkpoint", str(tmp_path / "run" / "checkpoint.mccl"), "--data", str(data),
                 "--out", str(tmp_path / "pred"), "--image-size", "32"]) == 0
    capsys.readouterr()
    assert main(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(data), "--name", "tiny",
                 "--out", str(tmp_path / "scores.tsv")]) == 0
    table = capsys.readouterr().out.splitlines()
    assert table[0].split() == ["Dataset", "Emax", "S", "Fmax", "MAE"]
    assert table[1].split()[0] == "tiny"
    assert (tmp_path / "scores.tsv").read_text().startswith("dataset\tgroup")


def test_cli_unknown_flag_is_usage_error(capsys):
    assert main(["train", "--no-such-flag"]) == 1
    assert main([]) == 1
    assert main(["synth"]) == 1


def test_cli_runtime_error_exit_code(tmp_path, capsys):
    assert main(["infer", "--checkpoint", str(tmp_path / "none.mccl"), "--data", str(tmp_path),
                 "--out", str(tmp_path / "o")]) == 2
    assert "error" in capsys.readouterr().err


def test_config_file_with_flag_override(tmp_path):
    f = tmp_path / "train.cfg"
    f.write_text("# desk run\nepochs = 7\nlr=0.001\nenable_ail = false\nchannels = 4,8,8,16\n")
    assert read_config(f) == {"epochs": "7", "lr": "0.001", "enable_ail": "false", "channels": "4,8,8,16"}
    cfg = build_train_config(str(f), {"epochs": 3, "lr": None})
    assert (cfg.epochs, cfg.lr, cfg.enable_ail, cfg.channels) == (3, 0.001, False, (4, 8, 8, 16))


def test_config_rejects_unknown_and_malformed_keys(tmp_path):
    f = tmp_path / "bad.cfg"
    f.write_text("epochz = 3\n")
    with pytest.raises(UsageError, match="epochz"):
        build_train_config(str(f), {})
    f.write_text("just words\n")
    with pytest.raises(UsageError):
        read_config(f)
    with pytest.raises(UsageError):
        build_train_config(None, {"enable_ail": "maybe"})
