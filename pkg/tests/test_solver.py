import numpy as np
import pytest
from hypothesis import example, given
from hypothesis import strategies as st

from oracles import grid_l1qr, lbfgs_lasso, lp_l1qr, naive_pivotal
from transqr.core import Study, quantile_objective
from transqr.solver import (PenaltySpec, PivotalLambdaSpec, RankDeficientError, SolverSettings,
                            check_dantzig_feasibility, column_scales, lasso_kkt_violation,
                            pivotal_penalty, simulate_pivotal_lambda, solve_l1qr,
                            solve_unpenalized_qr, solve_weighted_lasso)


def random_instance(seed, n, p, noise=1.0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    y = X @ rng.uniform(-1.5, 1.5, p) + noise * rng.standard_normal(n)
    return Study("s", X, y)


# ------------------------------------------------------------------- settings

def test_settings_validation():
    with pytest.raises(ValueError):
        SolverSettings(max_iterations=0)
    with pytest.raises(ValueError):
        SolverSettings(tolerance=0)
    with pytest.raises(ValueError):
        SolverSettings(admm_rho=-1)
    with pytest.raises(ValueError):
        PenaltySpec(-1.0)
    with pytest.raises(ValueError):
        PenaltySpec(1.0, weights=[1.0, -1.0])
    with pytest.raises(ValueError):
        PivotalLambdaSpec(alpha_star=1.0)
    with pytest.raises(ValueError):
        PivotalLambdaSpec(c_star=0)


def test_penalty_vector_tau_scaling():
    v = PenaltySpec(2.0, [1.0, 3.0], tau_scale=True).vector(2, 0.5)
    np.testing.assert_allclose(v, [1.0, 3.0])
    with pytest.raises(ValueError):
        PenaltySpec(1.0, [1.0]).vector(2, 0.5)


# ---------------------------------------------------------------------- l1-QR

def test_constant_design_median():
    s = Study("s", np.ones((5, 1)), [1.0, 2.0, 3.0, 4.0, 5.0])
    fit = solve_l1qr(s, 0.5, PenaltySpec(0.0))
    assert fit.converged
    assert fit.beta[0] == pytest.approx(3.0, abs=1e-9)


def test_huge_penalty_gives_zero():
    s = random_instance(1, 20, 3)
    fit = solve_l1qr(s, 0.3, PenaltySpec(1e6))
    assert np.all(fit.beta == 0.0)


def test_nan_data_rejected():
    with pytest.raises(ValueError):
        Study("s", [[1.0], [np.nan]], [1.0, 2.0])
    s = random_instance(0, 6, 2)
    with pytest.raises(ValueError):
        solve_l1qr(s, 0.5, PenaltySpec(0.1), offset=np.full(6, np.nan))


def test_matches_grid_oracle_small():
    s = random_instance(11, 8, 2)
    fit = solve_l1qr(s, 0.5, PenaltySpec(0.5))
    ref = grid_l1qr(s.X, s.y, 0.5, 0.5, steps=(0.01,))
    assert np.max(np.abs(fit.beta - ref)) <= 0.02


@pytest.mark.parametrize("seed", range(8))
def test_matches_lp_oracle(seed):
    rng = np.random.default_rng(seed)
    n, p = int(rng.integers(15, 60)), int(rng.integers(2, 8))
    s = random_instance(seed, n, p)
    tau = float(rng.choice([0.2, 0.5, 0.8]))
    w = rng.uniform(0.5, 2, p)
    pen = PenaltySpec(float(rng.uniform(0, 3)), w)
    offset = rng.standard_normal(n)
    fit = solve_l1qr(s, tau, pen, offset=offset)
    b_lp, f_lp = lp_l1qr(s.X, s.y, tau, pen.vector(p, tau), offset)
    assert fit.objective == pytest.approx(f_lp, rel=1e-7, abs=1e-9)
    assert np.max(np.abs(fit.beta - b_lp)) < 1e-5


def test_high_dimensional_matches_lp():
    s = random_instance(5, 40, 120)
    pen = pivotal_penalty(s, 0.3)
    fit = solve_l1qr(s, 0.5, pen)
    _, f_lp = lp_l1qr(s.X, s.y, 0.5, pen.vector(120, 0.5))
    assert fit.converged
    assert fit.objective == pytest.approx(f_lp, rel=1e-6)


def test_intercept_is_unpenalized():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((50, 3))
    y = 10.0 + X @ [1.0, 0.0, 0.0] + rng.standard_normal(50)
    s = Study("s", X, y)
    fit = solve_l1qr(s, 0.5, PenaltySpec(5.0), intercept=True)
    Xa = np.hstack([X, np.ones((50, 1))])
    b_lp, f_lp = lp_l1qr(Xa, y, 0.5, [5.0, 5.0, 5.0, 0.0])
    assert fit.intercept == pytest.approx(b_lp[3], abs=1e-6)
    np.testing.assert_allclose(fit.beta, b_lp[:3], atol=1e-6)


def test_objective_trace_monotone_and_kkt():
    s = random_instance(9, 60, 30)
    fit = solve_l1qr(s, 0.4, pivotal_penalty(s, 0.2))
    assert np.all(np.diff(fit.objective_trace) <= 1e-10)
    assert fit.converged and fit.kkt_residual <= 10 * SolverSettings().tolerance


def test_soft_sparsity():
    s = random_instance(3, 50, 10)
    tau, pen = 0.5, PenaltySpec(8.0)
    fit = solve_l1qr(s, tau, pen)
    e = s.y - s.X @ fit.beta
    g = s.X.T @ np.where(e > 0, tau, tau - 1)
    ties = np.abs(e) < 1e-9
    slack = np.abs(s.X[ties]).sum(axis=0)
    clearly_inside = np.abs(g) + slack < 8.0 - 1e-6
    assert np.all(fit.beta[clearly_inside] == 0.0)


@given(st.integers(0, 10_000), st.sampled_from([0.5, 2.0, 3.0, 10.0]))
def test_response_scaling_equivariance(seed, c):
    # with lambda held fixed, scaling y and the offset by c scales beta by c
    s = random_instance(seed, 25, 3)
    off = np.random.default_rng(seed + 1).standard_normal(25)
    pen = PenaltySpec(1.0)
    a = solve_l1qr(s, 0.3, pen, offset=off)
    b = solve_l1qr(Study("s", s.X, c * s.y), 0.3, pen, offset=c * off)
    np.testing.assert_allclose(b.beta, c * a.beta, atol=1e-6 * max(1.0, c))


def test_joint_lambda_scaling_is_not_equivariant():
    # scaling lambda together with y changes the fit; the fixed-lambda law above is the invariant
    s = random_instance(2, 25, 3)
    a = solve_l1qr(s, 0.5, PenaltySpec(2.0))
    b = solve_l1qr(Study("s", s.X, 2 * s.y), 0.5, PenaltySpec(4.0))
    assert np.max(np.abs(b.beta - 2 * a.beta)) > 1e-3


def test_bitwise_determinism():
    s = random_instance(7, 40, 20)
    pen = pivotal_penalty(s, 0.25)
    a, b = solve_l1qr(s, 0.7, pen), solve_l1qr(s, 0.7, pen)
    assert a.beta.tobytes() == b.beta.tobytes() and a.iterations == b.iterations


def test_nonconvergence_is_reported():
    s = random_instance(8, 80, 40)
    fit = solve_l1qr(s, 0.5, pivotal_penalty(s, 0.1),
                     SolverSettings(max_iterations=1, tolerance=1e-12))
    assert not fit.converged and fit.iterations == 1


# ---------------------------------------------------------------- unpenalized

def test_unpenalized_order_statistic():
    s = Study("s", np.ones((10, 1)), np.arange(1.0, 11.0))
    fit = solve_unpenalized_qr(s, 0.2)
    assert 2.0 - 1e-9 <= fit.beta[0] <= 3.0 + 1e-9
    e = s.y - fit.beta[0]
    assert np.mean(e < -1e-9) <= 0.2 <= np.mean(e <= 1e-9)


def test_unpenalized_exact_fit():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((20, 2))
    fit = solve_unpenalized_qr(Study("s", X, X @ [1.5, -2.0]), 0.3)
    np.testing.assert_allclose(fit.beta, [1.5, -2.0], atol=1e-9)


def test_unpenalized_local_optimality_probe():
    s = random_instance(21, 50, 3)
    fit = solve_unpenalized_qr(s, 0.6)
    f0 = quantile_objective(s, fit.beta, 0.6)
    rng = np.random.default_rng(1)
    for d in rng.standard_normal((1000, 3)) * rng.uniform(1e-4, 1, (1000, 1)):
        assert f0 <= quantile_objective(s, fit.beta + d, 0.6) + 1e-9


def test_unpenalized_rank_deficient():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((20, 3))
    X[:, 2] = X[:, 0] - 2 * X[:, 1]
    with pytest.raises(RankDeficientError) as err:
        solve_unpenalized_qr(Study("s", X, rng.standard_normal(20)), 0.5)
    assert err.value.columns == [2] and "3" in str(err.value)


def test_unpenalized_needs_more_rows():
    with pytest.raises(ValueError):
        solve_unpenalized_qr(random_instance(0, 3, 3), 0.5)


# ------------------------------------------------------------ pivotal lambda

def test_pivotal_matches_naive_oracle():
    s = random_instance(4, 100, 10)
    spec = PivotalLambdaSpec(0.05, 1.0, 1000, seed=123)
    got = simulate_pivotal_lambda(s, 0.5, spec)
    assert got == pytest.approx(naive_pivotal(s.X, 0.5, 0.05, 1.0, 1000, 123), rel=1e-12, abs=1e-12)
    assert got == simulate_pivotal_lambda(s, 0.5, spec)


def test_pivotal_linear_in_c_star():
    s = random_instance(4, 60, 5)
    a = simulate_pivotal_lambda(s, 0.3, PivotalLambdaSpec(0.05, 1.0, 200, 7))
    b = simulate_pivotal_lambda(s, 0.3, PivotalLambdaSpec(0.05, 1.5, 200, 7))
    assert b == pytest.approx(1.5 * a, rel=1e-15)


@given(st.integers(0, 1000), st.floats(0.01, 0.5), st.floats(0.01, 0.5))
def test_pivotal_nonincreasing_in_alpha(seed, a1, a2):
    s = random_instance(seed, 30, 4)
    lo, hi = sorted([a1, a2])
    f = lambda a: simulate_pivotal_lambda(s, 0.5, PivotalLambdaSpec(a, 1.0, 100, seed))
    assert f(hi) <= f(lo)


def test_pivotal_zero_variance_columns():
    s = random_instance(0, 30, 3)
    X = s.X.copy()
    X[:, 1] = 0.0
    z = Study("z", X, s.y)
    spec = PivotalLambdaSpec(0.1, 1.0, 100, 0)
    drop = Study("d", X[:, [0, 2]], s.y)
    assert simulate_pivotal_lambda(z, 0.5, spec) == pytest.approx(
        simulate_pivotal_lambda(drop, 0.5, spec), rel=1e-14)
    w = pivotal_penalty(z, 0.2).weights
    sig = column_scales(X)
    assert w[1] == pytest.approx((sig[0] + sig[2]) / 2)
    with pytest.raises(ValueError):
        simulate_pivotal_lambda(Study("o", np.zeros((5, 2)), np.ones(5)), 0.5, spec)


# ------------------------------------------------------------- weighted lasso

def test_lasso_zero_penalty_is_ols():
    rng = np.random.default_rng(0)
    D = rng.standard_normal((4, 4))
    r = rng.standard_normal(4)
    th = solve_weighted_lasso(r, D, 0.0, SolverSettings(tolerance=1e-10, max_iterations=100000))
    np.testing.assert_allclose(th, np.linalg.solve(D, r), atol=1e-6)


def test_lasso_null_threshold():
    rng = np.random.default_rng(1)
    D, r = rng.standard_normal((10, 3)), rng.standard_normal(10)
    lam = 2 * np.max(np.abs(D.T @ r))
    assert np.all(solve_weighted_lasso(r, D, lam) == 0)


@pytest.mark.parametrize("seed", range(5))
def test_lasso_matches_lbfgs_oracle(seed):
    rng = np.random.default_rng(seed)
    D, r = rng.standard_normal((10, 3)), rng.standard_normal(10)
    lam = float(rng.uniform(0.5, 5))
    th = solve_weighted_lasso(r, D, lam, SolverSettings(tolerance=1e-10))
    np.testing.assert_allclose(th, lbfgs_lasso(r, D, lam), atol=1e-6)
    assert lasso_kkt_violation(r, D, lam, th) <= 1e-9


def test_lasso_kkt_high_dimensional():
    rng = np.random.default_rng(2)
    D, r = rng.standard_normal((40, 100)), rng.standard_normal(40)
    tol = 1e-6
    th = solve_weighted_lasso(r, D, 5.0, SolverSettings(tolerance=tol))
    assert lasso_kkt_violation(r, D, 5.0, th) <= 10 * tol


def test_lasso_input_errors():
    with pytest.raises(ValueError):
        solve_weighted_lasso([1.0, np.nan], np.ones((2, 1)), 1.0)
    with pytest.raises(ValueError):
        solve_weighted_lasso([1.0], np.ones((2, 1)), 1.0)


# -------------------------------------------------------- Dantzig feasibility

def test_feasibility_large_lambda():
    s = random_instance(0, 20, 2)
    rep = check_dantzig_feasibility([s], 0.5, np.zeros(2), [None], [100.0], 100.0)
    assert rep.feasible


def test_infeasible_far_from_optimum():
    s = random_instance(0, 40, 2)
    rep = check_dantzig_feasibility([s], 0.5, np.array([30.0, -30.0]), [None], [0.0], 0.0)
    assert not rep.feasible


def test_solution_is_feasible_at_its_lambda():
    s = random_instance(12, 80, 20)
    lam = simulate_pivotal_lambda(s, 0.5, PivotalLambdaSpec(seed=1))
    pen = pivotal_penalty(s, lam)
    fit = solve_l1qr(s, 0.5, pen)
    rep = check_dantzig_feasibility([s], 0.5, fit.beta, [None], [pen.vector(20, 0.5) / s.n],
                                    pen.vector(20, 0.5) / s.n)
    assert rep.feasible


def test_feasibility_dimension_mismatch():
    s = random_instance(0, 10, 2)
    with pytest.raises(ValueError):
        check_dantzig_feasibility([s], 0.5, np.zeros(3), [None], [1.0], 1.0)
    with pytest.raises(ValueError):
        check_dantzig_feasibility([s], 0.5, np.zeros(2), [None, None], [1.0], 1.0)


@given(st.integers(0, 10_000), st.floats(0.05, 0.6), st.sampled_from([0.2, 0.5, 0.8]))
@example(9550, 0.5289812715995428, 0.2)  # stagnated at iteration 31, before any LP polish
def test_pivotal_penalty_fits_match_lp(seed, lam, tau):
    # heavy penalties keep beta at zero for many early iterations; the solver must not stop there
    s = random_instance(seed, 60, 15)
    pen = pivotal_penalty(s, lam)
    fit = solve_l1qr(s, tau, pen)
    _, f_lp = lp_l1qr(s.X, s.y, tau, pen.vector(15, tau))
    assert fit.converged
    assert fit.objective == pytest.approx(f_lp, rel=1e-6)


def test_duplicated_rows_certify():
    # bootstrap resamples repeat rows; the fit must still reach a certified LP vertex
    s = random_instance(30, 200, 60)
    idx = np.random.default_rng(0).integers(0, 200, 200)
    r = s.take(idx)
    pen = pivotal_penalty(r, 0.15)
    fit = solve_l1qr(r, 0.6, pen, intercept=True)
    Xa = np.hstack([r.X, np.ones((200, 1))])
    _, f_lp = lp_l1qr(Xa, r.y, 0.6, np.append(pen.vector(60, 0.6), 0.0))
    assert fit.certified
    assert fit.objective == pytest.approx(f_lp, rel=1e-9)
