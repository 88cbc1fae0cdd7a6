import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from dura.exceptions import NonPositiveAlpha, NoNegatives, NotOneHot, ShapeMismatch
from dura.losses import (
    TERMS,
    BatchLabels,
    DshSchedule,
    LossConfig,
    dsh_negative_count,
    loss_dsh,
    loss_evidential,
    loss_kl,
    loss_m,
    loss_tal,
    loss_total,
    loss_triplet,
)
from dura.numeric import check_gradient

# moderate temperatures keep central differences resolvable (see README)
SMOOTH = LossConfig(tau_h=0.5, tau_t=0.5, tau_e=0.5, lambda2=0.7)


def sched_for(K, n):
    """Schedule whose negative count is exactly ``n``."""
    return DshSchedule(K, eta=1.0, mu=1, step=K - n)


# ---------------------------------------------------------------------------
# single-query terms


def test_loss_m_examples():
    assert loss_m([1, 1], [1, 0])[0] == pytest.approx(2 / 3, abs=1e-12)
    assert loss_m([2, 1], [1, 0])[0] == pytest.approx(1 / 3, abs=1e-12)


def test_loss_m_symmetric_alpha_permutation():
    a = np.full(5, 1.7)
    v = loss_m(a, [0, 0, 1, 0, 0])[0]
    for t in range(5):
        y = np.zeros(5)
        y[t] = 1
        assert loss_m(a, y)[0] == pytest.approx(v, abs=1e-15)


def test_loss_m_matches_monte_carlo_small():
    g = np.random.default_rng(4)
    for K in (2, 3, 5):
        alpha = g.uniform(1.2, 4.0, size=K)
        v = loss_m(alpha, np.eye(K)[1])[0]
        mean, se = oracles.mc_expected_sq(alpha, 1, 10**5, seed=K)
        assert abs(v - mean) < 3 * se


def test_loss_m_errors():
    with pytest.raises(NonPositiveAlpha):
        loss_m([0, 1], [1, 0])
    with pytest.raises(NotOneHot):
        loss_m([1, 1], [1, 1])
    with pytest.raises(ShapeMismatch):
        loss_m([1, 1], [1, 0, 0])


def test_loss_kl_examples():
    assert loss_kl([3.0, 1.0, 1.0], [1, 0, 0])[0] == 0.0
    assert loss_kl([7.3, 2.0], [1, 0])[0] == pytest.approx(0.193147, abs=5e-7)
    _, g = loss_kl([2.5, 1.0, 1.0], [1, 0, 0])
    np.testing.assert_array_equal(g, 0.0)


def test_loss_kl_nonnegative_and_zero_iff_uniform():
    g = np.random.default_rng(5)
    for _ in range(200):
        K = int(g.integers(2, 9))
        a = 1.0 + g.exponential(size=K)
        t = int(g.integers(K))
        assert loss_kl(a, np.eye(K)[t])[0] > 0
        a[np.arange(K) != t] = 1.0
        assert loss_kl(a, np.eye(K)[t])[0] < 1e-12


def test_single_query_gradients():
    g = np.random.default_rng(6)
    for _ in range(10):
        K = int(g.integers(2, 7))
        a = 1.0 + g.uniform(0.2, 2.0, size=K)
        y = np.eye(K)[int(g.integers(K))]
        for fn in (loss_m, loss_kl):
            _, grad = fn(a, y)
            assert check_gradient(lambda x: fn(x, y)[0], a, grad) < 1e-6


# ---------------------------------------------------------------------------
# evidential loss


def test_evidential_single_pair():
    cfg = LossConfig(tau_e=0.2)
    s = 0.3
    r = loss_evidential([[s]], BatchLabels.diagonal([0]), cfg)
    e = math.exp(math.tanh(s / 0.2))
    # two directions, each L_m(alpha, [1]) = variance of a 1-d Dirichlet = 0
    want = 2 * loss_m([e + 1], [1])[0]
    assert r.value == pytest.approx(want, abs=1e-15)
    assert r.per_term["L_KL_i2t"] == 0.0


def test_evidential_prefers_correct_pairing():
    K = 4
    S = np.full((K, K), -1.0)
    np.fill_diagonal(S, 1.0)
    labels = BatchLabels.diagonal(np.arange(K))
    good = loss_evidential(S, labels, LossConfig(tau_e=0.3)).value
    bad = loss_evidential(S[::-1], labels, LossConfig(tau_e=0.3)).value
    assert good < bad


def test_evidential_matches_loop_oracle():
    g = np.random.default_rng(7)
    for _ in range(10):
        K = 6
        S = g.uniform(-1, 1, size=(K, K))
        ident = g.integers(0, 3, size=K)
        noisy = g.random(K) < 0.3
        cfg = LossConfig(tau_e=0.2, lambda2=0.4)
        r = loss_evidential(S, BatchLabels.diagonal(ident, noisy), cfg)
        assert r.value == pytest.approx(oracles.evidential_value(S, ident, noisy, 0.2, 0.4), abs=1e-12)


def test_evidential_noisy_rows_keep_only_kl():
    g = np.random.default_rng(8)
    S = g.uniform(-1, 1, size=(4, 4))
    noisy = np.array([True, True, True, True])
    r = loss_evidential(S, BatchLabels.diagonal(np.arange(4), noisy), LossConfig(tau_e=0.3, lambda2=1.0))
    assert r.per_term["L_m_i2t"] == 0.0 and r.per_term["L_m_t2i"] == 0.0
    assert r.per_term["L_KL_i2t"] > 0


# ---------------------------------------------------------------------------
# DSH


def test_dsh_negative_count_examples():
    assert dsh_negative_count(DshSchedule(64, 0.5, 1, 0)) == 64
    assert dsh_negative_count(DshSchedule(64, 0.5, 8, 120)) == 8
    assert dsh_negative_count(DshSchedule(64, 0.0, 8, 10**6)) == 64
    assert dsh_negative_count(DshSchedule(64, 0.5, 8, 0), available=10) == 10


def test_dsh_count_non_increasing():
    counts = [dsh_negative_count(DshSchedule(64, 0.05, 8, s)) for s in range(3000)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    assert min(counts) == 8


def _hand_batch():
    S = np.array(
        [
            [0.6, 0.55, 0.30],
            [-1.0, 1.0, -1.0],
            [-1.0, -1.0, 1.0],
        ]
    )
    return S, BatchLabels.diagonal(np.arange(3))


def test_dsh_hand_examples():
    S, labels = _hand_batch()
    r = loss_dsh(S, labels, sched_for(3, 1), LossConfig(gamma=0.2, tau_h=0.01))
    assert r.value == pytest.approx(0.15 / 3, abs=1e-12)
    r = loss_dsh(S, labels, sched_for(3, 2), LossConfig(gamma=0.2, tau_h=0.1))
    assert r.value * 3 == pytest.approx(0.15789, abs=5e-6)


def test_dsh_slack_has_zero_gradient():
    S = np.full((3, 3), -1.0)
    np.fill_diagonal(S, 1.0)
    r = loss_dsh(S, BatchLabels.diagonal(np.arange(3)), sched_for(3, 2), LossConfig(gamma=0.2, tau_h=0.1))
    assert r.value == 0.0
    np.testing.assert_array_equal(r.grad_S, 0.0)


def test_dsh_matches_loop_oracle():
    g = np.random.default_rng(9)
    for _ in range(20):
        K = int(g.integers(3, 10))
        S = g.uniform(-1, 1, size=(K, K))
        ident = g.integers(0, K, size=K)
        if np.unique(ident).size < 2:
            continue
        noisy = g.random(K) < 0.3
        if noisy.all():
            continue
        n = int(g.integers(1, K + 1))
        cfg = LossConfig(gamma=0.2, tau_h=0.07)
        r = loss_dsh(S, BatchLabels.diagonal(ident, noisy), sched_for(K, n), cfg)
        assert r.value == pytest.approx(oracles.dsh_value(S, ident, noisy, n, 0.07, 0.2), abs=1e-12)


def test_dsh_no_negatives():
    with pytest.raises(NoNegatives):
        loss_dsh(np.zeros((4, 4)), BatchLabels.diagonal([1, 1, 1, 1]), sched_for(4, 2))


def test_dsh_schedule_batch_mismatch():
    with pytest.raises(ShapeMismatch):
        loss_dsh(np.zeros((4, 4)), BatchLabels.diagonal(np.arange(4)), DshSchedule(8, mu=2))


def test_dsh_noisy_pairs_are_not_anchors():
    g = np.random.default_rng(10)
    S = g.uniform(-1, 1, size=(5, 5))
    noisy = np.array([False, True, False, False, False])
    r = loss_dsh(S, BatchLabels.diagonal(np.arange(5), noisy), sched_for(5, 2), LossConfig(tau_h=0.3))
    # row 1 and column 1 never act as anchors, yet stay available as negatives
    assert np.all(r.grad_S[1, 1] == 0.0)
    assert np.any(r.grad_S[1] != 0) or np.any(r.grad_S[:, 1] != 0)


# ---------------------------------------------------------------------------
# TAL


def test_tal_hand_example():
    S = np.full((3, 3), 0.7)
    np.fill_diagonal(S, 0.9)
    r = loss_tal(S, BatchLabels.diagonal(np.arange(3)), LossConfig(m=0.1, tau_t=1e-3))
    # six identical directional terms [0.1 - 0.9 + 0.9]
    assert r.value == pytest.approx(6 * 0.1 / 3, abs=1e-12)


def test_tal_constant_matrix():
    K, c, tau, m = 5, 0.3, 0.05, 0.1
    r = loss_tal(np.full((K, K), c), BatchLabels.diagonal(np.arange(K)), LossConfig(m=m, tau_t=tau))
    assert r.value == pytest.approx(2 * (m + tau * math.log(K)), abs=1e-12)


def test_tal_matches_loop_oracle():
    g = np.random.default_rng(11)
    for _ in range(20):
        K = int(g.integers(2, 9))
        S = g.uniform(-1, 1, size=(K, K))
        ident = g.integers(0, 3, size=K)
        noisy = g.random(K) < 0.3
        if noisy.all():
            continue
        cfg = LossConfig(m=0.1, tau_t=0.04)
        r = loss_tal(S, BatchLabels.diagonal(ident, noisy), cfg)
        assert r.value == pytest.approx(oracles.tal_value(S, ident, noisy, 0.04, 0.1), abs=1e-12)


def test_tal_weight_hook():
    g = np.random.default_rng(12)
    S = g.uniform(-1, 1, size=(6, 6))
    labels = BatchLabels.diagonal([0, 0, 1, 1, 2, 2])
    uniform = LossConfig(tau_t=0.1, tal_weights=lambda row, pos: pos / pos.sum())
    assert loss_tal(S, labels, uniform).value == pytest.approx(loss_tal(S, labels, LossConfig(tau_t=0.1)).value, abs=1e-15)


def test_shift_invariance():
    g = np.random.default_rng(13)
    S = g.uniform(-0.5, 0.5, size=(6, 6))
    labels = BatchLabels.diagonal([0, 1, 2, 3, 4, 5])
    cfg = LossConfig(gamma=2.0, m=2.0, tau_h=0.1, tau_t=0.1)  # large margins keep every hinge active
    for c in (-0.3, 0.25):
        assert loss_dsh(S + c, labels, sched_for(6, 3), cfg).value == pytest.approx(
            loss_dsh(S, labels, sched_for(6, 3), cfg).value, abs=1e-12
        )
        assert loss_tal(S + c, labels, cfg).value == pytest.approx(loss_tal(S, labels, cfg).value, abs=1e-12)


# ---------------------------------------------------------------------------
# gradients


@pytest.mark.parametrize("seed", range(5))
def test_batch_gradients(seed):
    g = np.random.default_rng(100 + seed)
    cfg = SMOOTH
    S, ident, noisy = oracles.kink_free_batch(g, 8, 4, cfg.tau_h, cfg.tau_t, cfg.gamma, cfg.m)
    labels = BatchLabels.diagonal(ident, noisy)
    sched = sched_for(8, 4)
    fns = {
        "e": lambda X: loss_evidential(X, labels, cfg),
        "h": lambda X: loss_dsh(X, labels, sched, cfg),
        "tal": lambda X: loss_tal(X, labels, cfg),
        "triplet": lambda X: loss_triplet(X, labels, cfg),
        "total": lambda X: loss_total(X, labels, sched, cfg),
    }
    for name, fn in fns.items():
        err = check_gradient(lambda X: fn(X).value, S, fn(S).grad_S)
        assert err < 1e-5, name


# ---------------------------------------------------------------------------
# total


def test_total_is_sum_of_terms():
    g = np.random.default_rng(14)
    S = g.uniform(-1, 1, size=(8, 8))
    labels = BatchLabels.diagonal(g.integers(0, 4, size=8), g.random(8) < 0.2)
    sched = sched_for(8, 3)
    cfg = LossConfig(tau_e=0.2, tau_h=0.1, tau_t=0.05)
    parts = [loss_evidential(S, labels, cfg), loss_dsh(S, labels, sched, cfg), loss_tal(S, labels, cfg)]
    tot = loss_total(S, labels, sched, cfg)
    assert tot.value == pytest.approx(sum(p.value for p in parts), abs=1e-12)
    np.testing.assert_allclose(tot.grad_S, sum(p.grad_S for p in parts), atol=1e-12, rtol=0)
    assert set(TERMS) <= set(tot.per_term)
    assert tot.per_term["L_e"] == parts[0].value and tot.per_term["L_h"] == parts[1].value


def test_total_zero_when_slack():
    S = np.full((4, 4), -1.0)
    np.fill_diagonal(S, 1.0)
    labels = BatchLabels.diagonal(np.arange(4))
    r = loss_total(S, labels, sched_for(4, 2), LossConfig(tau_h=0.01), ("h", "triplet"))
    assert r.value == 0.0
    np.testing.assert_array_equal(r.grad_S, 0.0)
    # TAL's logsumexp includes the positive, so each term is at least the margin
    assert loss_tal(S, labels, LossConfig(m=0.1, tau_t=0.01)).value >= 2 * 0.1 - 1e-12


def test_lambda2_anneal():
    cfg = LossConfig(lambda2_max=0.5, lambda2_anneal_epochs=10)
    assert cfg.lambda2_at(0) == 0.0
    assert cfg.lambda2_at(5) == 0.25
    assert cfg.lambda2_at(25) == 0.5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_dsh_monotone_in_n_property(seed):
    g = np.random.default_rng(seed)
    K = int(g.integers(3, 12))
    S = g.uniform(-1, 1, size=(K, K))
    labels = BatchLabels.diagonal(np.arange(K))
    vals = [loss_dsh(S, labels, sched_for(K, n), LossConfig(tau_h=0.05)).value for n in range(1, K + 1)]
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))
