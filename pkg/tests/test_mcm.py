"""Momentum memory and the group triplet objective."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mccl.mcm import ConsensusMemory, MemoryContractError, mcm_loss, memory_update, triplet_loss
from mccl.tensor import Tape, Tensor, backward


def t64(a, requires_grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=requires_grad, dtype=np.float64)


def norm(v):
    """Norm written independently of the library's reduction."""
    return math.sqrt(sum(float(x) * float(x) for x in np.ravel(v)))


def test_update_from_zero():
    mem = ConsensusMemory(beta=0.1)
    mem.update("c", np.zeros(3), np.zeros(3))
    v = np.array([1.0, -2.0, 4.0])
    memory_update(mem, "c", v, v)
    np.testing.assert_allclose(mem.get("c")[0], 0.9 * v, rtol=0, atol=1e-15)


def test_unseen_class_copies_incoming():
    mem = ConsensusMemory()
    v = np.array([0.3, 0.7])
    mem.update("new", v, 2 * v)
    np.testing.assert_array_equal(mem.get("new")[0], v)
    np.testing.assert_array_equal(mem.get("new")[1], 2 * v)


def test_fixed_point():
    mem = ConsensusMemory(beta=0.37)
    v = np.random.default_rng(0).normal(size=5)
    mem.update("c", v, v)
    mem.update("c", v, v)
    np.testing.assert_allclose(mem.get("c")[0], v, atol=1e-15)


@pytest.mark.parametrize("beta,f_scale", [(0.1, 0.0), (0.5, 1.0), (0.9, 1.0), (0.5, 0.0)])
def test_geometric_decay(beta, f_scale):
    # with F != 0 and beta = 0.1 the distance drops below float64 resolution of F by t ~ 13
    rng = np.random.default_rng(1)
    c0, f = rng.normal(size=8), f_scale * rng.normal(size=8)
    mem = ConsensusMemory(beta=beta)
    mem.update("c", c0, c0)
    d0 = np.linalg.norm(c0 - f)
    for t in range(1, 21):
        mem.update("c", f, f)
        got = np.linalg.norm(mem.get("c")[0] - f)
        assert abs(got - beta ** t * d0) <= 1e-5 * beta ** t * d0


def test_beta_zero_overwrites():
    mem = ConsensusMemory(beta=0.0)
    mem.update("c", np.ones(3), np.ones(3))
    v = np.array([5.0, 6.0, 7.0])
    mem.update("c", v, -v)
    np.testing.assert_array_equal(mem.get("c")[0], v)
    np.testing.assert_array_equal(mem.get("c")[1], -v)


def test_dimension_mismatch_is_contract_error():
    mem = ConsensusMemory()
    mem.update("a", np.zeros(3), np.zeros(3))
    with pytest.raises(MemoryContractError, match="dimension"):
        mem.update("b", np.zeros(4), np.zeros(4))
    with pytest.raises(MemoryContractError):
        mem.update("a", np.zeros(3), np.zeros(2))
    with pytest.raises(MemoryContractError, match="non-finite"):
        mem.update("a", np.array([np.nan, 0, 0]), np.zeros(3))


def test_invalid_hyperparameters():
    with pytest.raises(ValueError):
        ConsensusMemory(beta=1.0)
    with pytest.raises(ValueError):
        ConsensusMemory(alpha=0.0)


def test_triplet_closed_form():
    a = np.array([1.0, 0.0])
    loss = triplet_loss((t64(a), t64(a)), (None, np.array([1.0, 1.0])), alpha=0.1)
    assert loss.item() == pytest.approx(-0.9, abs=1e-12)


def test_triplet_degenerate_pair_gives_margin():
    rng = np.random.default_rng(2)
    c = (t64(rng.normal(size=4)), t64(rng.normal(size=4)))
    assert triplet_loss(c, c, alpha=0.1).item() == pytest.approx(0.1, abs=1e-12)


def test_triplet_random_against_independent_norm():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a1, b1, b2 = rng.normal(size=(3, 6))
        got = triplet_loss((t64(a1), t64(b1)), (None, b2), alpha=0.1).item()
        assert got == pytest.approx(norm(a1 - b1) - norm(a1 - b2) + 0.1, abs=1e-6)


def test_triplet_clamp_flag():
    a = np.array([1.0, 0.0])
    loss = triplet_loss((t64(a), t64(a)), (None, np.array([1.0, 1.0])), alpha=0.1, clamp=True)
    assert loss.item() == 0.0


def brute_force_mcm(classes, live, mem_b, alpha):
    total = 0.0
    for ci in classes:
        for cj in classes:
            a, b = live[ci]
            negative = b if ci == cj else mem_b[cj]
            total += norm(a - b) - norm(a - negative) + alpha
    return total / len(classes) ** 2


def random_instance(rng, n, d):
    classes = [f"k{i}" for i in range(n)]
    mem = ConsensusMemory(beta=float(rng.uniform(0, 0.9)), alpha=0.1)
    live = {}
    for c in classes:
        a, b = rng.normal(size=(2, d))
        mem.update(c, rng.normal(size=d), rng.normal(size=d))
        mem.update(c, a, b)
        live[c] = (a, b)
    return classes, mem, live


def test_single_class_loss_is_margin():
    mem = ConsensusMemory(alpha=0.25)
    v = np.random.default_rng(4).normal(size=3)
    mem.update("x", v, v + 1)
    assert mcm_loss(["x"], mem, {"x": (t64(v), t64(v + 1))}).item() == pytest.approx(0.25, abs=1e-15)


def test_all_equal_vectors_give_margin():
    v = np.array([0.2, -0.4, 0.9])
    mem = ConsensusMemory()
    for c in ("a", "b"):
        mem.update(c, v, v)
    live = {c: (t64(v), t64(v)) for c in ("a", "b")}
    assert mcm_loss(["a", "b"], mem, live).item() == pytest.approx(0.1, abs=1e-15)


def test_mcm_matches_brute_force_on_fifty_instances():
    rng = np.random.default_rng(5)
    for _ in range(50):
        n, d = int(rng.integers(1, 6)), int(rng.integers(1, 10))
        classes, mem, live = random_instance(rng, n, d)
        tl = {c: (t64(a), t64(b)) for c, (a, b) in live.items()}
        mem_b = {c: mem.get(c)[1] for c in classes}
        assert mcm_loss(classes, mem, tl).item() == pytest.approx(brute_force_mcm(classes, live, mem_b, 0.1), abs=1e-6)


def test_gradient_never_reaches_memory():
    rng = np.random.default_rng(6)
    classes, mem, live = random_instance(rng, 3, 4)
    before = {c: tuple(x.copy() for x in mem.get(c)) for c in classes}
    tl = {c: (t64(a, True), t64(b, True)) for c, (a, b) in live.items()}
    with Tape() as tape:
        loss = mcm_loss(classes, mem, tl)
    backward(loss, tape)
    for c in classes:
        assert tl[c][0].grad is not None
        for stored, old in zip(mem.get(c), before[c]):
            assert not isinstance(stored, Tensor)
            np.testing.assert_array_equal(stored, old)
    # every node input that carries memory data is a constant
    for node in tape.nodes:
        for inp in node.inputs:
            if any(inp.data is mem.get(c)[1] for c in classes):
                assert not inp.requires_grad


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_mcm_is_permutation_invariant(n, d, seed):
    rng = np.random.default_rng(seed)
    classes, mem, live = random_instance(rng, n, d)
    tl = {c: (t64(a), t64(b)) for c, (a, b) in live.items()}
    order = [classes[i] for i in rng.permutation(n)]
    assert mcm_loss(order, mem, tl).item() == pytest.approx(mcm_loss(classes, mem, tl).item(), abs=1e-12)


def test_missing_class_is_contract_error():
    mem = ConsensusMemory()
    mem.update("a", np.zeros(2), np.zeros(2))
    with pytest.raises(MemoryContractError, match="'b'"):
        mcm_loss(["a", "b"], mem, {"a": (t64([0, 0]), t64([0, 0])), "b": (t64([0, 0]), t64([0, 0]))})
    with pytest.raises(MemoryContractError, match="live"):
        mcm_loss(["a"], mem, {})


def test_state_roundtrip():
    mem = ConsensusMemory()
    mem.update("00_circle", np.arange(3.0), -np.arange(3.0))
    assert list(mem.state()) == ["mcm/00_circle/A", "mcm/00_circle/B"]
    other = ConsensusMemory()
    other.load_state(mem.state())
    np.testing.assert_array_equal(other.get("00_circle")[1], -np.arange(3.0))
