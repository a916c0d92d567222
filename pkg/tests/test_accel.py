import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from aanse.accel import (CONVERGED, FAILED, MAX_ITERS, AndersonConfig, AndersonHistory, IterationRecord, SolveTrace,
                         anderson_step, audit_recursion, lemma_m2_rows, run_accelerated, solve_mixing,
                         theta_threshold)
from aanse.errors import EmptyHistory, HypothesisViolated, InsufficientTrace, OperatorFailure
from aanse.linalg import InnerProduct, euclidean
from aanse.synthetic import linear_contraction, tanh_contraction
from aanse.verify import history_from_residuals, kkt_alphas


def window(W, rng=None):
    return history_from_residuals(np.asarray(W, dtype=float), rng or np.random.default_rng(0))


# ---------------------------------------------------------------- mixing
def test_first_step_has_no_choice():
    mix = solve_mixing(window([[1.0], [2.0]]))
    assert list(mix.alphas) == [1.0] and mix.theta == 1.0


def test_identical_residuals_drop_the_column():
    mix = solve_mixing(window([[1.0, 1.0], [2.0, 2.0]]))
    assert list(mix.alphas) == [0.0, 1.0]
    assert mix.theta == 1.0 and mix.depth == 0


def test_m1_worked_example():
    # older residual (0, 1), newest (1, 0)
    mix = solve_mixing(window([[0.0, 1.0], [1.0, 0.0]]))
    np.testing.assert_allclose(mix.alphas, [0.5, 0.5], rtol=1e-15)
    assert abs(mix.objective - math.sqrt(2) / 2) <= 1e-15
    assert abs(mix.theta - 0.70710678118654757) <= 1e-12


def test_converged_residual_gives_zero_theta():
    mix = solve_mixing(window([[1.0, 0.0], [1.0, 0.0]]))
    assert mix.theta == 0.0 and mix.alphas[-1] == 1.0


def test_empty_history():
    with pytest.raises(EmptyHistory):
        solve_mixing(AndersonHistory(2, euclidean(3)))


@given(st.integers(0, 4), st.integers(0, 100_000))
def test_matches_kkt_oracle(m, seed):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((6, m + 1))
    mix = solve_mixing(window(W, rng))
    ref = kkt_alphas(W)
    assert np.linalg.norm(mix.alphas - ref) <= 1e-10 * np.linalg.norm(ref)
    assert abs(mix.alphas.sum() - 1.0) <= 1e-12


@given(st.integers(1, 4), st.integers(0, 100_000))
def test_weighted_geometry_matches_kkt(m, seed):
    rng = np.random.default_rng(seed)
    n = 8
    B = rng.standard_normal((n, n))
    gram = B @ B.T + np.eye(n)
    W = rng.standard_normal((n, m + 1))
    h = AndersonHistory(m, InnerProduct(sp.csr_matrix(gram)))
    for j in range(m + 1):
        h.push(np.zeros(n), W[:, j])
    ref = kkt_alphas(W, gram)
    assert np.linalg.norm(solve_mixing(h).alphas - ref) <= 1e-9 * np.linalg.norm(ref)


@given(st.integers(1, 4), st.integers(0, 100_000))
def test_optimal_against_vertices_and_random_combinations(m, seed):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((5, m + 1))
    mix = solve_mixing(window(W, rng))
    tol = 1e-12 * np.linalg.norm(W)
    for j in range(m + 1):
        assert mix.objective <= np.linalg.norm(W[:, j]) + tol
    for _ in range(20):
        a = rng.standard_normal(m + 1)
        a[-1] = 1.0 - a[:-1].sum()
        assert mix.objective <= np.linalg.norm(W @ a) + tol


@given(st.integers(0, 4), st.integers(1, 9), st.integers(0, 100_000))
def test_theta_in_unit_interval(m, n, seed):
    rng = np.random.default_rng(seed)
    mix = solve_mixing(window(rng.standard_normal((n, m + 1)), rng))
    assert 0.0 <= mix.theta <= 1.0 + 1e-12


def test_eta_is_largest_partial_sum():
    W = np.array([[3.0, 0.0, 1.0], [0.0, 1.0, 0.5]])
    mix = solve_mixing(window(W))
    partial = np.cumsum(mix.alphas)[:-1]
    assert mix.eta_partial == pytest.approx(np.abs(partial).max(), abs=0)


def test_window_slides():
    h = AndersonHistory(1, euclidean(1))
    for j in range(4):
        h.push(np.array([float(j)]), np.array([j + 1.0]))
    assert len(h) == 2 and [u[0] for u in h.iterates] == [2.0, 3.0]


# ------------------------------------------------------------------ step
def test_depth_zero_step_returns_image():
    h = AndersonHistory(0, euclidean(3))
    h.push(np.ones(3))
    g = np.array([0.1, 0.2, 0.3])
    u, _ = anderson_step(h, g, AndersonConfig())
    assert np.array_equal(u, g)


def test_equal_weights_average_images():
    h = AndersonHistory(1, euclidean(2))
    h.push(np.zeros(2), np.array([0.0, 1.0]))      # residual (0, 1)
    h.push(np.zeros(2))
    u, mix = anderson_step(h, np.array([1.0, 0.0]), AndersonConfig(depth_m=1))  # residual (1, 0)
    np.testing.assert_allclose(mix.alphas, [0.5, 0.5])
    np.testing.assert_allclose(u, [0.5, 0.5])


def test_damped_step_by_hand():
    A = np.array([[0.5, 0.1], [0.0, 0.3]])
    b = np.array([1.0, -1.0])
    G = lambda u: A @ u + b
    u0, u1 = np.array([0.0, 0.0]), np.array([0.4, 0.2])
    g0, g1 = G(u0), G(u1)
    w0, w1 = g0 - u0, g1 - u1
    d = w1 - w0
    a_old = w1 @ d / (d @ d)
    beta = 0.5
    expect = beta * (a_old * g0 + (1 - a_old) * g1) + (1 - beta) * (a_old * u0 + (1 - a_old) * u1)
    h = AndersonHistory(1, euclidean(2))
    h.push(u0, g0)
    h.push(u1)
    u, _ = anderson_step(h, g1, AndersonConfig(depth_m=1, damping_beta=beta))
    np.testing.assert_allclose(u, expect, rtol=1e-14)


def test_config_validation():
    with pytest.raises(ValueError):
        AndersonConfig(depth_m=-1)
    with pytest.raises(ValueError):
        AndersonConfig(damping_beta=0.0)
    with pytest.raises(ValueError):
        AndersonConfig(tol_abs=0.0)


# ---------------------------------------------------------------- driver
def test_step_ratio_bounded_by_contraction():
    lin = linear_contraction(20, 0.5, seed=1)
    tr = run_accelerated(lin, np.zeros(20), AndersonConfig(max_iters=100, tol_abs=1e-12))
    assert tr.status == CONVERGED
    ratios = tr.step_ratios()[1:]
    assert np.all(ratios <= 0.5 + 1e-10)


def test_acceleration_does_not_slow_linear_problem():
    lin = linear_contraction(20, 0.5, seed=1)
    cfg = AndersonConfig(max_iters=200, tol_abs=1e-12)
    t0 = run_accelerated(lin, np.zeros(20), cfg)
    t2 = run_accelerated(lin, np.zeros(20), AndersonConfig(depth_m=2, max_iters=200, tol_abs=1e-12))
    assert t2.status == CONVERGED and t2.iterations <= t0.iterations


def test_shift_map_never_converges():
    c = np.array([1.0, -2.0])
    for m in (0, 2):
        tr = run_accelerated(lambda u: u + c, np.zeros(2), AndersonConfig(depth_m=m, max_iters=30))
        assert tr.status != CONVERGED


def test_operator_failure_is_recorded():
    def op(u):
        if u[0] > 0.5:
            raise OperatorFailure("inner solve failed")
        return u + 0.4

    tr = run_accelerated(op, np.zeros(1), AndersonConfig(max_iters=10))
    assert tr.status == FAILED and "inner solve" in tr.error and tr.iterations == 2


def test_max_iters_status():
    lin = linear_contraction(10, 0.99, seed=2)
    assert run_accelerated(lin, np.zeros(10), AndersonConfig(max_iters=3)).status == MAX_ITERS


@pytest.mark.parametrize("m", [0, 1, 2, 3])
def test_alphas_sum_to_one_on_every_step(m):
    tr = run_accelerated(tanh_contraction(15, 0.8, seed=m), np.zeros(15),
                         AndersonConfig(depth_m=m, tol_abs=1e-12))
    assert all(abs(sum(r.alphas) - 1.0) <= 1e-12 for r in tr.records)
    assert all(r.theta <= 1.0 + 1e-12 for r in tr.records)


# ------------------------------------------------------------- threshold
def test_threshold_values():
    assert abs(theta_threshold(0.9, 0.1, 1, 1) - 8 / 9) <= 1e-12
    assert abs(theta_threshold(0.9, 0.1, 1, 2) - 0.8) <= 1e-12
    assert abs(theta_threshold(0.9, 0.1, 1, 7) - 0.8) <= 1e-12
    assert abs(theta_threshold(0.9, 0.1, 2, 3) - 0.62) <= 1e-12


@given(st.floats(0.05, 0.95), st.integers(1, 5), st.integers(1, 12))
def test_threshold_is_one_without_budget(r, m, k):
    if k > m:
        assert theta_threshold(r, 0.0, m, k) == pytest.approx(1.0, abs=1e-15)


def test_threshold_hypothesis_violation():
    with pytest.raises(HypothesisViolated):
        theta_threshold(0.9, 0.5, 2, 3)
    with pytest.raises(ValueError):
        theta_threshold(1.2, 0.1, 1, 1)


@given(st.floats(0.1, 0.95), st.integers(1, 4), st.integers(1, 8), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_threshold_decreases_with_budget(r, m, k, a, b):
    limit = r ** m * (1 - r) / (1 - r ** m)
    e1, e2 = sorted((a * limit * 0.999, b * limit * 0.999))
    assert theta_threshold(r, e2, m, k) <= theta_threshold(r, e1, m, k) + 1e-14


# ----------------------------------------------------------------- audits
def make_trace(e, theta=1.0, eta=0.0, m=0, w=None):
    """Trace whose update norms are ``e`` (``e[0]`` unused)."""
    recs = []
    for k, ek in enumerate(e):
        recs.append(IterationRecord(k=k, residual_norm=(w[k] if w else 1.0), theta=theta, alphas=[1.0],
                                    eta_partial=eta, step_ratio=math.nan, wall_time=0.0,
                                    update_norm=(math.nan if k == 0 else ek)))
    return SolveTrace(config={"depth_m": m}, records=recs)


def test_audit_flags_exactly_the_bad_step():
    tr = make_trace([math.nan, 1.0, 0.5, 0.25, 0.2, 0.1])
    rep = audit_recursion(tr, 0.5)
    assert rep.violations == [3]
    assert rep.satisfied == 3


def test_audit_needs_three_records():
    with pytest.raises(InsufficientTrace):
        audit_recursion(make_trace([math.nan, 1.0]), 0.5)


@pytest.mark.parametrize("m", [0, 1, 2, 3])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_recursion_holds_on_linear_contraction(m, seed):
    lin = linear_contraction(30, 0.9, seed)
    tr = run_accelerated(lin, np.zeros(30), AndersonConfig(depth_m=m, tol_abs=1e-11, max_iters=300))
    rep = audit_recursion(tr, 0.9)
    assert rep.violated == 0 and rep.rows


@pytest.mark.parametrize("seed", range(5))
def test_depth_two_lemma_on_nonlinear_contraction(seed):
    f = tanh_contraction(12, 0.7, seed)
    tr = run_accelerated(f, np.zeros(12), AndersonConfig(depth_m=2, tol_abs=1e-12))
    rep = lemma_m2_rows(tr, 0.7)
    assert rep.rows and rep.violated == 0
    assert audit_recursion(tr, 0.7).violated == 0
