import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from sibow.errors import ConvergenceError, DataError
from sibow.wsvm import (
    KernelSpec,
    ProbabilityEstimate,
    baseline_b1,
    baseline_b2,
    box_bounds,
    classify,
    couple_anchor,
    couple_pairwise,
    default_pi_grid,
    dual_objective,
    egkl,
    estimate_binary_prob,
    fit_multiclass,
    kernel_matrix,
    predict_proba,
    predict_proba_matrix,
    probs_from_decisions,
    table_from_probs,
    table_from_ratios,
    train_binary_wsvm,
    train_pi_series,
    tune_egkl,
)


def gaussian_blobs(seed, n_per=30, K=3, spread=3.0):
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(K) / K
    means = spread * np.c_[np.cos(angles), np.sin(angles)]
    X = np.concatenate([rng.normal(m, 1.0, (n_per, 2)) for m in means])
    y = np.repeat(np.arange(1, K + 1), n_per)
    return X, y


def qp_oracle_objective(K, y, C):
    """Solve the box-constrained SVM dual with an interior-point QP solver."""
    cvxopt = pytest.importorskip("cvxopt")
    from cvxopt import matrix, solvers

    n = y.size
    Q = (y[:, None] * y[None, :]) * K
    solvers.options.update({"show_progress": False, "abstol": 1e-12, "reltol": 1e-12, "feastol": 1e-12})
    sol = solvers.qp(
        matrix(Q), matrix(-np.ones(n)),
        matrix(np.vstack([-np.eye(n), np.eye(n)])), matrix(np.concatenate([np.zeros(n), C])),
        matrix(y[None, :].astype(float)), matrix(0.0),
    )
    a = np.array(sol["x"]).ravel()
    return 0.5 * a @ Q @ a - a.sum()


def test_kernel_values():
    k = KernelSpec("rbf", 1.0)
    u = np.array([[0.3, 0.1]])
    assert kernel_matrix(u, u, k)[0, 0] == 1.0
    v = u + np.array([[math.sqrt(math.log(2)), 0.0]])
    assert kernel_matrix(u, v, k)[0, 0] == pytest.approx(0.5, abs=1e-12)


def test_gram_is_psd():
    X = np.random.default_rng(0).normal(size=(20, 5))
    G = kernel_matrix(X, X, KernelSpec("rbf", 0.3))
    np.testing.assert_allclose(G, G.T)
    assert np.linalg.eigvalsh(G).min() >= -1e-8


def test_separable_pair():
    m = train_binary_wsvm(np.array([[-1.0], [1.0]]), np.array([-1, 1]), 0.5, 0.01, KernelSpec("linear"))
    f = m.decision(kernel_matrix(np.array([[-1.0], [1.0]]), np.array([[-1.0], [1.0]]), m.kernel))
    assert f[0] < 0 < f[1]
    assert np.all(np.maximum(0, 1 - np.array([-1, 1]) * f) <= 1e-3)


@pytest.mark.parametrize("pi", [0.2, 0.5, 0.8])
def test_dual_matches_qp_oracle(pi):
    rng = np.random.default_rng(12)
    X = rng.normal(size=(12, 2))
    y = np.where(X[:, 0] + 0.5 * rng.normal(size=12) > 0, 1.0, -1.0)
    k, lam = KernelSpec("rbf", 0.7), 0.05
    m = train_binary_wsvm(X, y, pi, lam, k)
    K = kernel_matrix(X, X, k)
    C = box_bounds(y, pi, lam)
    assert np.all(m.alpha >= 0) and np.all(m.alpha <= C + 1e-12)
    assert abs(y @ m.alpha) < 1e-10
    ours, ref = dual_objective(K, y, m.alpha), qp_oracle_objective(K, y, C)
    assert abs(ours - ref) <= 1e-5 * abs(ref)


def test_positive_fraction_falls_with_pi():
    rng = np.random.default_rng(3)
    X = np.r_[rng.normal(-0.5, 1, 60), rng.normal(0.8, 1, 40)][:, None]
    y = np.r_[-np.ones(60), np.ones(40)]
    s = train_pi_series(X, y, default_pi_grid(9), 0.05, KernelSpec("rbf", 0.5))
    frac = (s.decision_values(X) >= 0).mean(axis=1)
    # aggregate check: a least-squares trend is decreasing and the ends are ordered
    assert np.polyfit(s.pis, frac, 1)[0] < 0
    assert frac[0] >= frac[-1]


def test_single_class_and_cap():
    with pytest.raises(DataError):
        train_binary_wsvm(np.zeros((3, 1)), np.ones(3), 0.5, 1.0, KernelSpec())
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 2))
    y = np.where(rng.random(40) > 0.5, 1.0, -1.0)
    with pytest.raises(ConvergenceError) as ei:
        train_binary_wsvm(X, y, 0.5, 1e-4, KernelSpec("rbf", 1.0), max_iter=2)
    assert ei.value.kkt_violation > 0


def test_default_grid():
    g = default_pi_grid()
    assert g.size == 19
    np.testing.assert_allclose(g, np.arange(1, 20) * 0.05)


def test_estimator_boundaries_and_single_point_grid():
    pis = default_pi_grid()
    F = np.stack([np.full(19, -1.0), np.full(19, 1.0)], axis=1)
    np.testing.assert_allclose(probs_from_decisions(F, pis), [0.025, 0.975])
    one = np.array([0.5])
    np.testing.assert_allclose(probs_from_decisions(np.array([[-1.0, 2.0]]), one), [0.25, 0.75])


def test_estimator_rules_on_non_monotone_signs():
    pis = np.array([0.25, 0.5, 0.75])
    F = np.array([[1.0], [-1.0], [1.0]])
    assert probs_from_decisions(F, pis, "largest")[0] == pytest.approx(0.875)
    assert probs_from_decisions(F, pis, "count")[0] == pytest.approx(0.625)


def test_binary_prob_at_zero_is_near_half():
    rng = np.random.default_rng(1)
    y = np.where(rng.random(400) < 0.5, 1.0, -1.0)
    X = (y + rng.normal(size=400))[:, None]
    s = train_pi_series(X, y, None, 0.01, KernelSpec("rbf", 0.5))
    p0 = estimate_binary_prob(s, np.array([0.0]))
    assert 0.4 <= p0 <= 0.6
    grid = np.linspace(-3, 3, 7)[:, None]
    bayes = 1 / (1 + np.exp(-2 * grid[:, 0]))
    assert np.mean(np.abs(estimate_binary_prob(s, grid) - bayes)) < 0.12


def test_two_class_coupling_reduces_to_conditional():
    T = np.array([[0.5, 0.7], [0.3, 0.5]])
    p, per = couple_pairwise(T)
    np.testing.assert_allclose(p, [0.7, 0.3], atol=1e-12)


def test_symmetric_table_gives_uniform():
    p, _ = couple_pairwise(np.full((3, 3), 0.5))
    np.testing.assert_allclose(p, [1 / 3] * 3)


def test_planted_roundtrip():
    planted = np.array([0.5, 0.3, 0.2])
    T = table_from_probs(planted)
    for k in range(3):
        np.testing.assert_allclose(couple_anchor(T, k), planted, atol=1e-9)
    np.testing.assert_allclose(couple_pairwise(T)[0], planted, atol=1e-9)


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2**31), K=st.integers(2, 6), scale=st.floats(1e-3, 1e3))
def test_ratio_scaling_invariance(seed, K, scale):
    r = np.random.default_rng(seed).uniform(0.05, 5.0, K)
    T1, T2 = table_from_ratios(r), table_from_ratios(scale * r)
    np.testing.assert_allclose(T1, T2, atol=1e-12)
    assert np.all(T1 + T1.T == 1.0)
    np.testing.assert_allclose(r / r.sum(), (scale * r) / (scale * r).sum(), atol=1e-12)


def test_classify_rules():
    assert classify(ProbabilityEstimate(np.array([0.1, 0.7, 0.2])), "argmax") == 2
    T = np.array([[0.5, 0.2, 0.6], [0.8, 0.5, 0.9], [0.4, 0.1, 0.5]])
    assert classify(ProbabilityEstimate(np.array([0.3, 0.4, 0.3]), T), "maxvote") == 2
    cyc = np.array([[0.5, 0.8, 0.3], [0.2, 0.5, 0.8], [0.7, 0.2, 0.5]])
    assert classify(ProbabilityEstimate(np.array([0.3, 0.3, 0.4]), cyc), "maxvote") == 3
    with pytest.raises(ValueError):
        classify(ProbabilityEstimate(np.array([0.5, 0.5])), "maxvote")


def test_baselines():
    y = np.repeat([1, 2, 3, 4], [926, 937, 901, 500])
    assert baseline_b1(y, 4) == 2
    X = np.array([[0.0], [1.0], [1.1], [5.0]])
    assert baseline_b2(X, np.array([1, 2, 3, 4]), 4) == 2


@pytest.mark.parametrize(
    "scheme,count", [("pairwise", 6), ("baseline_b1", 3), ("baseline_b2", 3), ("bp", 3), ("ova", 4)]
)
def test_component_counts_and_prob_sums(scheme, count):
    X, y = gaussian_blobs(0, 12, K=4)
    m = fit_multiclass(X, y, scheme, default_pi_grid(9), 0.05, KernelSpec("rbf", 0.5))
    assert len(m.components) == count
    P, T = predict_proba_matrix(m, X)
    assert np.all(P >= 0)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)
    if scheme in ("pairwise", "bp"):
        assert T is not None
        np.testing.assert_allclose(T + T.transpose(0, 2, 1), 1.0, atol=1e-12)
    assert (P.argmax(axis=1) + 1 == y).mean() > 0.7


def test_workers_do_not_change_models():
    X, y = gaussian_blobs(1, 15)
    a = fit_multiclass(X, y, "pairwise", default_pi_grid(5), 0.1, KernelSpec("rbf", 0.5), workers=1)
    b = fit_multiclass(X, y, "pairwise", default_pi_grid(5), 0.1, KernelSpec("rbf", 0.5), workers=4)
    for key in a.components:
        for ma, mb in zip(a.components[key].models, b.components[key].models):
            assert ma.alpha.tobytes() == mb.alpha.tobytes() and ma.bias == mb.bias


def test_predict_proba_single_row():
    X, y = gaussian_blobs(2, 10)
    m = fit_multiclass(X, y, "bp", default_pi_grid(5), 0.1, KernelSpec("rbf", 0.5))
    est = predict_proba(m, X[0])
    assert est.probs.shape == (3,) and est.pairwise_table.shape == (3, 3)


def test_egkl_values():
    P = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert egkl(P, np.array([1, 2])) == 0.0
    assert egkl(P, np.array([2, 1])) == pytest.approx(-math.log(1e-6))


def test_tune_single_point_and_rerun():
    X, y = gaussian_blobs(3, 20)
    res = tune_egkl(X, y, "ova", [0.1], [0.5], 7, default_pi_grid(5))
    assert (res.lam, res.gamma) == (0.1, 0.5)
    assert res.egkl == res.table[0]["egkl"]
    a = tune_egkl(X, y, "ova", [0.01, 0.1], [0.25, 0.5], 7, default_pi_grid(5))
    b = tune_egkl(X, y, "ova", [0.01, 0.1], [0.25, 0.5], 7, default_pi_grid(5))
    assert (a.lam, a.gamma, a.egkl) == (b.lam, b.gamma, b.egkl)
    assert a.egkl == min(r["egkl"] for r in a.table)
    assert np.intersect1d(a.train_idx, a.tune_idx).size == 0


def test_bayes_reference_is_logistic():
    # sanity of the oracle used by the acceptance checks
    x = 0.7
    post = norm.pdf(x, 1, 1) / (norm.pdf(x, 1, 1) + norm.pdf(x, -1, 1))
    assert post == pytest.approx(1 / (1 + math.exp(-2 * x)))
