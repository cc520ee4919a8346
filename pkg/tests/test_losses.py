import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odcwa.losses import (
    LossCoefficients,
    MemoryBank,
    build_anchors,
    combined_loss,
    cross_entropy_loss,
    cwa_loss,
    delta_schedule,
    instance_contrastive_loss,
    mine_hard_examples,
    predictive_entropy,
    unknown_probability_loss,
    uncertainty_weight,
)
from odcwa.numerics import make_rng, softmax_rows
from oracles import central_fd, max_rel_error


def unit_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def filled_bank(rng, K=3, dim=4, per_class=5, capacity=64):
    bank = MemoryBank(K, dim, capacity)
    for c in range(K):
        bank.enqueue(rng.normal(size=(per_class, dim)), [c] * per_class)
    return bank


# -- memory bank -------------------------------------------------------------


def test_bank_fifo_and_capacity():
    bank = MemoryBank(2, 2, capacity=3)
    vecs = [np.array([1.0, float(i)]) for i in range(5)]
    for v in vecs:
        bank.enqueue(v[None, :], [0])
    assert bank.count(0) == 3
    kept = bank.queue(0)
    for got, want in zip(kept, vecs[2:]):
        np.testing.assert_allclose(got, want / np.linalg.norm(want))


def test_bank_skips_unknown_and_background():
    bank = MemoryBank(2, 2)
    bank.enqueue(np.ones((3, 2)), [0, 2, 3])
    assert len(bank) == 1


# -- contrastive ---------------------------------------------------------------


def test_ic_hand_example():
    bank = MemoryBank(2, 2)
    bank.enqueue(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 1])
    t = instance_contrastive_loss(np.array([[1.0, 0.0]]), [0], bank, tau=1.0)
    assert t.value == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)


def test_ic_single_positive_no_negatives_is_zero():
    bank = MemoryBank(2, 2)
    bank.enqueue(np.array([[0.6, 0.8]]), [0])
    assert instance_contrastive_loss(np.array([[0.6, 0.8]]), [0], bank, 0.1).value == pytest.approx(0.0, abs=1e-15)


def test_ic_empty_bank_and_skips():
    bank = MemoryBank(2, 2)
    t = instance_contrastive_loss(np.array([[1.0, 0.0]]), [0], bank)
    assert t.value == 0.0 and t.warning
    bank.enqueue(np.array([[1.0, 0.0]]), [0])
    t = instance_contrastive_loss(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 1], bank)
    assert t.skipped == 1
    with pytest.raises(ValueError):
        instance_contrastive_loss(np.array([[1.0, 0.0]]), [0], bank, tau=0.0)


@pytest.mark.parametrize("seed", range(3))
def test_ic_gradient(seed):
    rng = make_rng(seed)
    bank = filled_bank(rng)
    z = unit_rows(rng.normal(size=(6, 4)))
    y = rng.integers(0, 3, size=6)
    t = instance_contrastive_loss(z, y, bank, 0.5)
    num = central_fd(lambda v: instance_contrastive_loss(v, y, bank, 0.5).value, z)
    assert max_rel_error(t.grad, num) < 1e-4


# -- cross-entropy ---------------------------------------------------------------


def test_ce_examples():
    assert cross_entropy_loss(np.zeros((1, 3)), [1]).value == pytest.approx(math.log(3), abs=1e-15)
    assert cross_entropy_loss(np.array([[50.0, 0, 0]]), [0]).value < 1e-10
    v = cross_entropy_loss(np.array([[2.0, 1.0, 0.0]]), [0]).value
    assert v == pytest.approx(-math.log(math.e**2 / (math.e**2 + math.e + 1)), abs=1e-12)
    with pytest.raises(ValueError):
        cross_entropy_loss(np.zeros((1, 3)), [3])


def test_ce_gradient():
    rng = make_rng(1)
    L = rng.normal(size=(5, 4)) * 3
    y = rng.integers(0, 4, size=5)
    num = central_fd(lambda v: cross_entropy_loss(v, y).value, L)
    assert max_rel_error(cross_entropy_loss(L, y).grad, num) < 1e-4


# -- unknown probability -----------------------------------------------------------


def test_up_hand_example():
    # classes: known=0, unknown=1, background=2
    L = np.array([[2.0, 1.0, 0.0]])
    p_t = math.e**2 / (math.e**2 + math.e + 1)
    w = (1 - p_t) * p_t
    pbar = math.e / (math.e + 1)
    assert w == pytest.approx(0.2227, abs=1e-4)
    assert pbar == pytest.approx(0.7311, abs=1e-4)
    t = unknown_probability_loss(L, [0], 1.0, unknown_index=1)
    assert t.value == pytest.approx(-w * math.log(pbar), abs=1e-12)
    assert t.value == pytest.approx(0.0698, abs=1e-4)


def test_up_vanishes_when_confident():
    L = np.array([[50.0, 1.0, 0.0]])
    assert unknown_probability_loss(L, [0], 1.0, 1).value < 1e-8


def test_up_rejects_unknown_ground_truth():
    with pytest.raises(ValueError, match="UP loss undefined for unknown ground truth"):
        unknown_probability_loss(np.zeros((1, 3)), [1], 1.0, 1)


@pytest.mark.parametrize("seed", range(3))
def test_up_gradient_with_pinned_weight(seed):
    rng = make_rng(seed)
    L = rng.normal(size=(6, 5)) * 2
    y = rng.choice([0, 1, 2, 4], size=6)
    w0 = uncertainty_weight(softmax_rows(L)[np.arange(6), y])
    t = unknown_probability_loss(L, y, 1.0, 3)
    num = central_fd(lambda v: unknown_probability_loss(v, y, 1.0, 3, weight=w0).value, L)
    assert max_rel_error(t.grad, num) < 1e-4


# -- anchors and CWA ---------------------------------------------------------------


def test_anchor_examples():
    A = build_anchors(2, 4, 20.0)
    np.testing.assert_array_equal(A.anchors, [[20, 0, 0, 0], [0, 20, 0, 0]])
    assert not np.any(build_anchors(3, 5, 0.0).anchors)
    A = build_anchors(4, 6, 20.0)
    for i in range(4):
        for j in range(i + 1, 4):
            assert np.abs(A.anchors[i] - A.anchors[j]).sum() == 40.0


def test_cwa_zero_at_anchor():
    A = build_anchors(3, 5, 20.0)
    L = np.vstack([A.anchors[0]] * 3 + [A.anchors[2]] * 2)
    assert abs(cwa_loss(L, [0, 0, 0, 2, 2], A, 1, 0.1).value) <= 1e-8


def test_cwa_single_sample_distance():
    A = build_anchors(2, 4, 20.0)
    L = A.anchors[0] + np.array([[3.0, -2.0, 1.5, 0.5]])
    assert cwa_loss(L, [0], A, 1, 1e-3).value == pytest.approx(7.0, abs=1e-2)


def test_cwa_symmetric_pair_pulled_toward_anchor():
    A = build_anchors(2, 4, 20.0)
    d = np.array([1.0, -2.0, 0.5, 3.0])
    L = np.vstack([A.anchors[1] + d, A.anchors[1] - d])
    g = cwa_loss(L, [1, 1], A, 1, 0.1).grad
    assert np.all(np.sign(g[0]) == np.sign(d))
    assert np.all(np.sign(g[1]) == -np.sign(d))


def test_cwa_no_known_samples_warns():
    A = build_anchors(2, 4, 20.0)
    t = cwa_loss(np.zeros((2, 4)), [2, 3], A)
    assert t.value == 0.0 and t.warning


@pytest.mark.parametrize("scale", [0.05, 1.0, 10.0])
def test_cwa_gradient(scale):
    rng = make_rng(3)
    A = build_anchors(3, 5, 20.0)
    L = rng.normal(size=(8, 5)) * scale
    y = rng.integers(0, 4, size=8)
    t = cwa_loss(L, y, A, 1, 0.1)
    num = central_fd(lambda v: cwa_loss(v, y, A, 1, 0.1).value, L)
    assert max_rel_error(t.grad, num) < 1e-4


def test_cwa_gradient_p2():
    rng = make_rng(4)
    A = build_anchors(2, 4, 5.0)
    L = rng.normal(size=(6, 4))
    y = rng.integers(0, 2, size=6)
    t = cwa_loss(L, y, A, 2, 0.5)
    num = central_fd(lambda v: cwa_loss(v, y, A, 2, 0.5).value, L)
    assert max_rel_error(t.grad, num) < 1e-4


def test_cwa_descends_along_negative_gradient():
    rng = make_rng(5)
    A = build_anchors(3, 5, 20.0)
    for _ in range(5):
        L = rng.normal(size=(9, 5)) * 4
        y = rng.integers(0, 3, size=9)
        t = cwa_loss(L, y, A, 1, 0.1)
        assert t.value >= -1e-9
        assert cwa_loss(L - 1e-4 * t.grad, y, A, 1, 0.1).value < t.value


# -- mining and schedule ---------------------------------------------------------------


def test_mining_picks_near_uniform_sample():
    L = np.array([[9.0, 0, 0, 0], [0.1, 0, 0, 0], [8.0, 0, 0, 0], [0, 0, 0, 7.0], [0, 0, 0, 0.2]])
    picked = mine_hard_examples(L, [0, 1, 0, 3, 3], num_known=2, k_fg=1, k_bg=1)
    np.testing.assert_array_equal(picked, [1, 4])


def test_mining_ties_and_short_supply():
    L = np.zeros((6, 4))
    picked = mine_hard_examples(L, [0, 1, 0, 1, 3, 3], num_known=2, k_fg=3, k_bg=3)
    np.testing.assert_array_equal(picked, [0, 1, 2, 4, 5])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_mining_permutation_invariant(seed):
    rng = make_rng(seed)
    L = rng.normal(size=(12, 5))
    y = rng.choice([0, 1, 2, 4], size=12)
    perm = rng.permutation(12)
    a = set(mine_hard_examples(L, y, 3).tolist())
    b = set(perm[mine_hard_examples(L[perm], y[perm], 3)].tolist())
    # distinct random entropies make the selection unique
    assert a == b


def test_entropy_bounds():
    H = predictive_entropy(np.array([[0.0, 0.0, 0.0], [100.0, 0.0, 0.0]]))
    assert H[0] == pytest.approx(math.log(3))
    assert H[1] == pytest.approx(0.0, abs=1e-30)


def test_delta_schedule():
    assert delta_schedule(0.21, 0, 100) == 0.21
    assert delta_schedule(0.21, 100, 100) == 0.0
    assert delta_schedule(0.21, 50, 100) == pytest.approx(0.105)
    assert delta_schedule(0.21, 150, 100) == 0.0


# -- combined objective ------------------------------------------------------------------


def combined_setup(seed, K=3):
    rng = make_rng(seed)
    C = K + 2
    L = rng.normal(size=(10, C)) * 3
    Z = unit_rows(rng.normal(size=(10, 4)))
    y = np.concatenate([np.arange(K), rng.choice(list(range(K)) + [K + 1], size=10 - K)])
    bank = filled_bank(rng, K, 4)
    return L, Z, y, bank, build_anchors(K, C, 20.0)


def test_combined_defaults():
    c = LossCoefficients()
    assert (c.lam, c.beta, c.delta, c.alpha_w, c.blur, c.p) == (1.7e-3, 0.5, 0.21, 1.0, 0.1, 1.0)


def test_combined_breakdown_identity_and_reductions():
    L, Z, y, bank, A = combined_setup(0)
    coef = LossCoefficients()
    mined = mine_hard_examples(L, y, 3)
    bd, _, _ = combined_loss("OD-CWA", L, Z, y, bank, A, coef, mined, 3)
    expected = bd.lam * bd.l_cwa + bd.beta * bd.l_up + bd.l_ce + bd.delta * bd.l_ic
    assert bd.total == pytest.approx(expected, abs=1e-12)

    zero = LossCoefficients(lam=0.0)
    a = combined_loss("OD-CWA", L, Z, y, bank, A, zero, mined, 3)
    b = combined_loss("OD-SN", L, Z, y, bank, A, zero, mined, 3)
    assert a[0].total == b[0].total
    np.testing.assert_array_equal(a[1], b[1])
    np.testing.assert_array_equal(a[2], b[2])

    ce, g_l, g_z = combined_loss("CE-baseline", L, Z, y, bank, A, coef, mined, 3)
    assert ce.l_ic == ce.l_up == ce.l_cwa == 0.0
    assert ce.total == cross_entropy_loss(L, y).value
    assert not np.any(g_z)

    with pytest.raises(ValueError):
        combined_loss("OD", L, Z, y, bank, A, coef, mined, 3)


@pytest.mark.parametrize("mode", ["OD-SN", "OD-CWA"])
def test_combined_gradient(mode):
    L, Z, y, bank, A = combined_setup(1)
    coef = LossCoefficients(lam=0.05)
    mined = mine_hard_examples(L, y, 3)
    w0 = uncertainty_weight(softmax_rows(L[mined])[np.arange(mined.size), y[mined]])
    _, g_l, g_z = combined_loss(mode, L, Z, y, bank, A, coef, mined, 3)

    def total(Lv, Zv):
        return combined_loss(mode, Lv, Zv, y, bank, A, coef, mined, 3, up_weight=w0)[0].total

    assert max_rel_error(g_l, central_fd(lambda v: total(v, Z), L)) < 1e-4
    assert max_rel_error(g_z, central_fd(lambda v: total(L, v), Z)) < 1e-4
