"""Debiased inference on one coefficient through an orthogonal score.

Each study contributes a score state: quantile-spacing densities f_i, a
density-weighted lasso projection of x_1 on the other covariates (residual
v_i), and a post-selected QR pilot fit. The debiased estimate minimizes the
absolute pooled score over a bounded grid around the pilot coefficient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Study, validate_tau
from .seeding import derive_seed
from .solver import (PivotalLambdaSpec, SolverSettings, pivotal_penalty,
                     simulate_pivotal_lambda, solve_l1qr, solve_unpenalized_qr,
                     solve_weighted_lasso)

Z_975 = 1.959964


class DegenerateVarianceError(ArithmeticError):
    pass


def normal_quantile(level: float) -> float:
    """Two-sided critical value; 0.95 maps to the fixed constant 1.959964."""
    if level == 0.95:
        return Z_975
    from scipy.stats import norm
    return float(norm.ppf(0.5 + level / 2.0))


@dataclass(frozen=True)
class InferenceSettings:
    coefficient_index: int = 1          # 1-based
    post_select_threshold: float = 0.01
    c_theta: float = 0.1
    theta_scale: str = "mean"           # "mean": c*sqrt(log p/n) per observation (times n); "sum": as is
    grid_points: int = 201
    refine_factor: int = 10
    lambda_tau_cstar: dict = field(default_factory=lambda: {0.5: 1.0, 0.7: 0.95, 0.2: 0.9})
    default_cstar: float = 1.0
    alpha_star: float = 0.05
    n_draws: int = 1000
    spacing_floor: float = 1e-6
    spacing_floor_rel: float = 0.1      # floor as a fraction of the median spacing
    level: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if self.coefficient_index < 1:
            raise ValueError("coefficient_index is 1-based and must be >= 1")
        if not (self.post_select_threshold > 0 and self.c_theta > 0):
            raise ValueError("post_select_threshold and c_theta must be positive")
        if self.grid_points < 3 or self.grid_points % 2 == 0:
            raise ValueError("grid_points must be odd and >= 3")
        if self.theta_scale not in ("sum", "mean"):
            raise ValueError("theta_scale must be 'sum' or 'mean'")

    def cstar(self, tau: float) -> float:
        for t, c in self.lambda_tau_cstar.items():
            if abs(float(t) - tau) < 1e-12:
                return float(c)
        return self.default_cstar


def spacing_bandwidth(n: int, tau: float) -> float:
    return min(n ** (-1.0 / 6.0), tau * (1.0 - tau) / 2.0)


@dataclass
class StudyScoreState:
    study_id: str
    f_hat: np.ndarray
    theta_hat: np.ndarray
    v_hat: np.ndarray
    w_tilde: np.ndarray
    selected: np.ndarray
    clipped: np.ndarray | None = None
    bandwidth: float = float("nan")
    lambda_theta: float = float("nan")


@dataclass(frozen=True)
class DebiasedResult:
    alpha_hat: float
    sigma_hat_sq: float
    ci_lower: float
    ci_upper: float
    search_region: tuple
    n_total: int
    score_at_solution: float
    study_ids: tuple = ()

    @property
    def ci_length(self) -> float:
        return self.ci_upper - self.ci_lower

    def covers(self, value: float) -> bool:
        return self.ci_lower <= value <= self.ci_upper


def estimate_density_spacing(study: Study, tau: float, settings: InferenceSettings | None = None,
                             solver_settings: SolverSettings | None = None,
                             return_clipped: bool = False):
    """f_i = 2h / (x_i'b_{tau+h} - x_i'b_{tau-h}) from two l1-QR fits.

    The auxiliary fits carry an unpenalized intercept. Non-positive spacings
    (crossed quantile fits) give f_i = 0; positive spacings are floored at
    max(``spacing_floor``, ``spacing_floor_rel`` * median positive spacing),
    which keeps a few near-crossings from dominating the weights. With
    ``return_clipped`` the boolean mask of affected observations is returned.
    """
    tau = validate_tau(tau)
    settings = settings or InferenceSettings()
    h = spacing_bandwidth(study.n, tau)
    c = settings.cstar(tau)
    pred = []
    for level in (tau + h, tau - h):
        seed = derive_seed(settings.seed, "spacing", study.fingerprint(), repr(level))
        lam = simulate_pivotal_lambda(
            study, level, PivotalLambdaSpec(settings.alpha_star, c, settings.n_draws, seed))
        fit = solve_l1qr(study, level, pivotal_penalty(study, lam), solver_settings,
                         intercept=True)
        pred.append(study.X @ fit.beta + fit.intercept)
    gap = pred[0] - pred[1]
    floor = settings.spacing_floor
    pos = gap[gap > 0]
    if pos.size:
        floor = max(floor, settings.spacing_floor_rel * float(np.median(pos)))
    clipped = gap < floor
    f = np.where(gap > 0, 2.0 * h / np.maximum(gap, floor), 0.0)
    return (f, clipped) if return_clipped else f


def _split(X, j):
    return X[:, j], np.delete(X, j, axis=1)


def fit_projection(study: Study, f_hat, coefficient_index: int, lambda_theta: float,
                   solver_settings: SolverSettings | None = None) -> StudyScoreState:
    """Weighted lasso of f*x_j on f*x_{-j}; v is its residual."""
    f = np.asarray(f_hat, dtype=np.float64)
    if f.shape != (study.n,) or np.any(f < 0) or not np.all(np.isfinite(f)):
        raise ValueError("f_hat must be a finite non-negative vector of length n")
    j = coefficient_index - 1
    if not 0 <= j < study.p:
        raise IndexError(f"coefficient_index {coefficient_index} outside 1..{study.p}")
    x1, xr = _split(study.X, j)
    resp = f * x1
    D = f[:, None] * xr
    theta = solve_weighted_lasso(resp, D, lambda_theta, solver_settings)
    v = resp - D @ theta
    return StudyScoreState(study.id, f, theta, v, np.zeros(study.p), np.zeros(0, dtype=int),
                           lambda_theta=float(lambda_theta))


def post_select_and_refit(study: Study, beta_hat, delta_tilde, tau: float, lambda_bar: float,
                          solver_settings: SolverSettings | None = None,
                          coefficient_index: int = 1):
    """Unpenalized QR on {j : |beta_j + delta_j| > lambda_bar}, re-embedded in p dims.

    Returns ``(w_tilde, selected)``; an empty selection refits on the
    coefficient of interest alone.
    """
    if not lambda_bar > 0:
        raise ValueError("lambda_bar must be positive")
    b = np.asarray(beta_hat, dtype=np.float64)
    if delta_tilde is not None:
        b = b + np.asarray(delta_tilde, dtype=np.float64)
    sel = np.flatnonzero(np.abs(b) > lambda_bar)
    if sel.size == 0:
        sel = np.array([coefficient_index - 1])
    if sel.size > study.n / 2:
        raise ValueError(f"study {study.id!r}: {sel.size} selected columns exceed n/2 = {study.n / 2}")
    sub = Study(study.id, study.X[:, sel], study.y, study.role)
    fit = solve_unpenalized_qr(sub, tau, solver_settings)
    w = np.zeros(study.p)
    w[sel] = fit.beta
    return w, sel


def build_score_state(study: Study, beta_plus_delta, tau: float,
                      settings: InferenceSettings | None = None,
                      solver_settings: SolverSettings | None = None) -> StudyScoreState:
    """Densities, projection and post-selected pilot fit for one study."""
    settings = settings or InferenceSettings()
    f, clipped = estimate_density_spacing(study, tau, settings, solver_settings,
                                          return_clipped=True)
    lam = settings.c_theta * math.sqrt(math.log(study.p) / study.n)
    if settings.theta_scale == "mean":
        lam *= study.n
    st = fit_projection(study, f, settings.coefficient_index, lam, solver_settings)
    w, sel = post_select_and_refit(study, beta_plus_delta, None, tau,
                                   settings.post_select_threshold, solver_settings,
                                   settings.coefficient_index)
    st.w_tilde = w
    st.selected = sel
    st.clipped = clipped
    st.bandwidth = spacing_bandwidth(study.n, tau)
    return st


def empirical_score(study: Study, state: StudyScoreState, alpha, tau: float,
                    coefficient_index: int = 1):
    """sum_i (1{y_i <= x_i1 alpha + x_i,-1'w_-1} - tau) v_i; vectorized over ``alpha``."""
    j = coefficient_index - 1
    x1, xr = _split(study.X, j)
    base = xr @ np.delete(state.w_tilde, j)
    a = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    ind = study.y[:, None] <= x1[:, None] * a[None, :] + base[:, None]
    out = (ind - tau).T @ state.v_hat
    return float(out[0]) if np.ndim(alpha) == 0 else out


def search_region(studies, beta1: float, coefficient_index: int = 1) -> tuple:
    j = coefficient_index - 1
    x1sq = sum(float(np.sum(s.X[:, j] ** 2)) for s in studies)
    n = sum(s.n for s in studies)
    return _region(studies, beta1, n, x1sq)


def _region(studies, beta1, n, x1sq):
    if x1sq <= 0:
        raise DegenerateVarianceError("coefficient column is identically zero")
    r = 10.0 * (x1sq / n) ** -0.5 / math.log(n)
    return (beta1 - r, beta1 + r)


def _argmin(grid, vals, beta1):
    a = np.abs(vals)
    m = a.min()
    cand = np.flatnonzero(a == m)
    k = cand[np.argmin(np.abs(grid[cand] - beta1))]
    return k


def solve_score(studies, states, beta1: float, tau: float,
                settings: InferenceSettings | None = None) -> DebiasedResult:
    """Grid minimization of |aggregate score| plus variance and interval."""
    settings = settings or InferenceSettings()
    j = settings.coefficient_index - 1
    n = sum(s.n for s in studies)
    x1sq = sum(float(np.sum(s.X[:, j] ** 2)) for s in studies)
    lo, hi = _region(studies, beta1, n, x1sq)

    def total(alpha):
        return sum(empirical_score(s, st, alpha, tau, settings.coefficient_index)
                   for s, st in zip(studies, states))

    grid = np.linspace(lo, hi, settings.grid_points)
    vals = total(grid)
    k = _argmin(grid, vals, beta1)
    step = grid[1] - grid[0]
    fine = np.linspace(max(lo, grid[k] - step), min(hi, grid[k] + step),
                       2 * settings.refine_factor + 1)
    fvals = total(fine)
    both = np.concatenate([grid, fine])
    bvals = np.concatenate([vals, fvals])
    k = _argmin(both, bvals, beta1)
    alpha = float(both[k])
    vv = sum(float(np.sum(st.v_hat ** 2)) for st in states)
    if not vv > 0:
        raise DegenerateVarianceError("sum of squared projection residuals is zero")
    sigma2 = tau * (1.0 - tau) * n / vv
    half = normal_quantile(settings.level) * math.sqrt(sigma2 / n)
    return DebiasedResult(alpha, sigma2, alpha - half, alpha + half, (lo, hi), n,
                          float(bvals[k]), tuple(s.id for s in studies))


def debias(target: Study, sources_in_set, transfer_estimate, tau: float,
           settings: InferenceSettings | None = None,
           solver_settings: SolverSettings | None = None,
           states: dict | None = None) -> DebiasedResult:
    """Debiased estimate of the chosen coefficient pooling target and sources.

    ``transfer_estimate`` supplies beta_hat and the contrasts of the sources.
    Pass ``states`` (dict keyed by study id) to reuse score states built for
    the same beta_hat and contrasts.
    """
    tau = validate_tau(tau)
    settings = settings or InferenceSettings()
    if not 1 <= settings.coefficient_index <= target.p:
        raise IndexError(f"coefficient_index {settings.coefficient_index} outside 1..{target.p}")
    beta = np.asarray(transfer_estimate.beta_hat, dtype=np.float64)
    studies = [target] + list(sources_in_set)
    cache = {} if states is None else states
    sts = []
    for s in studies:
        if s.id not in cache:
            d = 0.0 if s is target else transfer_estimate.contrasts[s.id]
            cache[s.id] = build_score_state(s, beta + d, tau, settings, solver_settings)
        sts.append(cache[s.id])
    return solve_score(studies, sts, float(beta[settings.coefficient_index - 1]), tau, settings)
