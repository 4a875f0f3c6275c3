"""Transfer estimation: contrasts, transferable-set detection and pooling.

``fit_with_known_set`` iterates contrast fits and pooled fits for a given
set of sources. ``detect_transferable_set`` screens every source by the
l1 size of its contrast and by its residual density at the target quantile,
and ``fit_transfer`` pools over the detected set with the contrasts frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import median_abs_deviation

from .core import Study, validate_tau
from .seeding import derive_seed
from .solver import (PivotalLambdaSpec, QuantileFit, SolverSettings, pivotal_penalty,
                     simulate_pivotal_lambda, solve_l1qr)


@dataclass(frozen=True)
class TuningSpec:
    """Pivotal tuning constants (mean-loss scale)."""

    alpha_star: float = 0.05
    n_draws: int = 1000
    c_target: float = 1.0
    c_contrast: float = 1.5
    c_pooled: float = 1.0
    seed: int = 0


@dataclass(frozen=True)
class LambdaOverrides:
    """Fixed mean-scale lambdas; anything left as None is simulated."""

    target: float | None = None
    pooled: float | None = None
    contrasts: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DetectionThresholds:
    t1: float = 5.0
    t2: float = 0.3
    bandwidths: dict = field(default_factory=dict)

    def __post_init__(self):
        # t1 = 0 screens out every source (a target-only fit)
        if not (self.t1 >= 0 and self.t2 > 0):
            raise ValueError("need t1 >= 0 and t2 > 0")
        for k, b in self.bandwidths.items():
            if not b > 0:
                raise ValueError(f"bandwidth for {k!r} must be positive")


@dataclass(frozen=True)
class DensityEstimate:
    value: float
    bandwidth: float
    n_inside: int


@dataclass(frozen=True)
class OracleSetSpec:
    set_ids: frozenset
    h1: float | None = None
    h2: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "set_ids", frozenset(self.set_ids))


@dataclass
class TransferEstimate:
    beta_hat: np.ndarray
    contrasts: dict
    detected_set: frozenset
    set_c1: frozenset
    set_c2: frozenset
    densities: dict = field(default_factory=dict)
    lambdas_used: dict = field(default_factory=dict)
    beta_initial: np.ndarray | None = None
    rounds: int = 0
    converged: bool = True
    fits: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.detected_set = frozenset(self.detected_set)
        self.set_c1 = frozenset(self.set_c1)
        self.set_c2 = frozenset(self.set_c2)


def _check_inputs(target: Study, sources):
    if target.n < 1:
        raise ValueError("target study is empty")
    ids = [s.id for s in sources]
    if len(set(ids)) != len(ids):
        raise ValueError(f"source ids must be unique, got {ids}")
    if target.id in ids:
        raise ValueError(f"source id {target.id!r} clashes with the target id")
    for s in sources:
        if s.p != target.p:
            raise ValueError(f"study {s.id!r} has p={s.p}, target has p={target.p}")
    return {s.id: s for s in sources}


class _Tuner:
    """Simulates (and caches) pivotal lambdas keyed by study content."""

    def __init__(self, tau, tuning: TuningSpec, overrides: LambdaOverrides | None):
        self.tau = tau
        self.tuning = tuning
        self.over = overrides or LambdaOverrides()
        self.used = {}

    def _simulate(self, study: Study, c_star: float, purpose: str) -> float:
        t = self.tuning
        seed = derive_seed(t.seed, purpose, study.fingerprint(), repr(self.tau))
        spec = PivotalLambdaSpec(t.alpha_star, c_star, t.n_draws, seed)
        return simulate_pivotal_lambda(study, self.tau, spec)

    def target(self, study):
        lam = self.over.target
        if lam is None:
            lam = self._simulate(study, self.tuning.c_target, "target")
        self.used["target"] = float(lam)
        return float(lam)

    def contrast(self, study):
        lam = self.over.contrasts.get(study.id)
        if lam is None:
            lam = self._simulate(study, self.tuning.c_contrast, "contrast")
        self.used[f"contrast:{study.id}"] = float(lam)
        return float(lam)

    def pooled(self, stacked):
        lam = self.over.pooled
        if lam is None:
            lam = self._simulate(stacked, self.tuning.c_pooled, "pooled")
        self.used["pooled"] = float(lam)
        return float(lam)


def _fit(study, tau, lam, settings, offset=None) -> QuantileFit:
    return solve_l1qr(study, tau, pivotal_penalty(study, lam), settings, offset=offset)


def _canonical(sources):
    # stacking order independent of how the caller ordered or named sources
    return sorted(sources, key=lambda s: (s.fingerprint(), s.id))


def _stack(target: Study, members) -> Study:
    X = np.vstack([target.X] + [s.X for s in members])
    y = np.concatenate([target.y] + [s.y for s in members])
    return Study("pooled", X, y, target.role)


def _pooled_fit(target, members, contrasts, tau, tuner, settings):
    members = _canonical(members)
    stacked = _stack(target, members)
    off = np.concatenate([np.zeros(target.n)] + [s.X @ contrasts[s.id] for s in members])
    lam = tuner.pooled(stacked)
    return _fit(stacked, tau, lam, settings, offset=off)


def _contrast_fit(study, beta, tau, tuner, settings):
    return _fit(study, tau, tuner.contrast(study), settings, offset=study.X @ beta)


def _iterate(target, members, beta0, tau, tuner, settings, T, contrasts=None, fits=None):
    """T rounds of {contrasts at the current beta; pooled fit}. ``contrasts``
    pre-seeds round one (frozen detection contrasts)."""
    beta = beta0
    converged = True
    rounds = 0
    fits = {} if fits is None else fits
    contrasts = dict(contrasts or {})
    for t in range(T):
        if t > 0 or not contrasts:
            for s in members:
                f = _contrast_fit(s, beta, tau, tuner, settings)
                contrasts[s.id] = f.beta
                fits[f"contrast:{s.id}"] = f
                converged &= f.converged
        if members:
            f = _pooled_fit(target, members, contrasts, tau, tuner, settings)
            fits["pooled"] = f
            converged &= f.converged
            new = f.beta
        else:
            new = beta
        rounds = t + 1
        step = float(np.max(np.abs(new - beta)))
        beta = new
        if step < 1e-4:
            break
    return beta, contrasts, rounds, converged


def fit_with_known_set(target: Study, sources, known: OracleSetSpec, tau: float,
                       lambdas: LambdaOverrides | None = None,
                       settings: SolverSettings | None = None, T: int = 1,
                       tuning: TuningSpec | None = None) -> TransferEstimate:
    """Pooled transfer estimate for a prespecified set of sources.

    Contrasts are estimated only for members of the set.
    """
    tau = validate_tau(tau)
    if T < 1:
        raise ValueError("T must be >= 1")
    by_id = _check_inputs(target, sources)
    unknown = set(known.set_ids) - set(by_id)
    if unknown:
        raise ValueError(f"set references unknown studies: {sorted(unknown)}")
    settings = settings or SolverSettings()
    tuner = _Tuner(tau, tuning or TuningSpec(), lambdas)
    f0 = _fit(target, tau, tuner.target(target), settings)
    fits = {"target": f0}
    members = [s for s in sources if s.id in known.set_ids]
    beta, contrasts, rounds, conv = _iterate(target, members, f0.beta, tau, tuner,
                                             settings, T, fits=fits)
    ids = frozenset(known.set_ids)
    return TransferEstimate(beta, contrasts, ids, ids, ids, {}, tuner.used,
                            beta_initial=f0.beta, rounds=rounds,
                            converged=bool(conv and f0.converged), fits=fits)


def estimate_density_powell(study: Study, beta_plus_delta, bandwidth: float) -> DensityEstimate:
    """Indicator-count density of the residuals at zero: #{|r| <= b} / (2 b n)."""
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    r = study.y - study.X @ np.asarray(beta_plus_delta, dtype=np.float64)
    k = int(np.count_nonzero(np.abs(r) <= bandwidth))
    return DensityEstimate(k / (2.0 * bandwidth * study.n), float(bandwidth), k)


def compute_detection_bandwidth(study: Study, residuals, c_b: float = 1.0) -> float:
    """max(c_b * MAD * n^(-1/5), 1e-3), MAD scaled to be normal-consistent."""
    r = np.asarray(residuals, dtype=np.float64)
    if r.shape != (study.n,):
        raise ValueError(f"residuals have shape {r.shape}, expected ({study.n},)")
    if r.size < 10:
        raise ValueError("bandwidth rule needs at least 10 residuals")
    mad = median_abs_deviation(r, scale="normal")
    return float(max(c_b * mad * r.size ** (-0.2), 1e-3))


def _density(study, b, thresholds):
    r = study.y - study.X @ b
    bw = thresholds.bandwidths.get(study.id)
    if bw is None:
        bw = compute_detection_bandwidth(study, r)
    return estimate_density_powell(study, b, bw)


def detect_transferable_set(target: Study, sources, tau: float,
                            thresholds: DetectionThresholds | None = None,
                            settings: SolverSettings | None = None,
                            lambdas: LambdaOverrides | None = None,
                            tuning: TuningSpec | None = None,
                            _tuner: _Tuner | None = None) -> TransferEstimate:
    """Screen sources; the returned ``beta_hat`` is the target-only fit."""
    tau = validate_tau(tau)
    _check_inputs(target, sources)
    thresholds = thresholds or DetectionThresholds()
    settings = settings or SolverSettings()
    tuner = _tuner or _Tuner(tau, tuning or TuningSpec(), lambdas)
    f0 = _fit(target, tau, tuner.target(target), settings)
    beta0 = f0.beta
    fits = {"target": f0}
    contrasts = {}
    for s in sources:
        f = _contrast_fit(s, beta0, tau, tuner, settings)
        contrasts[s.id] = f.beta
        fits[f"contrast:{s.id}"] = f
    bound = thresholds.t1 * math.sqrt(math.log(target.p) / target.n)
    c1 = {k for k, d in contrasts.items()
          if thresholds.t1 > 0 and float(np.sum(np.abs(d))) <= bound}
    densities = {target.id: _density(target, beta0, thresholds)}
    if densities[target.id].value <= 0:
        raise ValueError("target density estimate is zero; the bandwidth is too small")
    for s in sources:
        densities[s.id] = _density(s, beta0 + contrasts[s.id], thresholds)
    f_target = densities[target.id].value
    c2 = {s.id for s in sources if densities[s.id].value >= thresholds.t2 * f_target}
    conv = all(f.converged for f in fits.values())
    return TransferEstimate(beta0, contrasts, c1 & c2, c1, c2, densities, tuner.used,
                            beta_initial=beta0, rounds=0, converged=conv, fits=fits)


def fit_transfer(target: Study, sources, tau: float,
                 thresholds: DetectionThresholds | None = None,
                 lambdas: LambdaOverrides | None = None,
                 settings: SolverSettings | None = None, rounds: int = 1,
                 tuning: TuningSpec | None = None) -> TransferEstimate:
    """Detect the transferable set, then pool over it with frozen contrasts.

    ``rounds > 1`` continues the contrast/pool iteration on the detected set.
    """
    tau = validate_tau(tau)
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    settings = settings or SolverSettings()
    tuner = _Tuner(tau, tuning or TuningSpec(), lambdas)
    det = detect_transferable_set(target, sources, tau, thresholds, settings, _tuner=tuner)
    members = [s for s in sources if s.id in det.detected_set]
    frozen = {k: det.contrasts[k] for k in det.detected_set}
    fits = dict(det.fits)
    beta, upd, used_rounds, conv = _iterate(target, members, det.beta_hat, tau, tuner,
                                            settings, rounds, contrasts=frozen, fits=fits)
    contrasts = dict(det.contrasts)
    contrasts.update(upd)
    return TransferEstimate(beta, contrasts, det.detected_set, det.set_c1, det.set_c2,
                            det.densities, tuner.used, beta_initial=det.beta_hat,
                            rounds=used_rounds, converged=bool(conv and det.converged),
                            fits=fits)


def fit_naive_pooling(target: Study, sources, tau: float,
                      settings: SolverSettings | None = None,
                      tuning: TuningSpec | None = None) -> TransferEstimate:
    """Plain l1-QR on the stacked target and sources, ignoring any parameter shift."""
    tau = validate_tau(tau)
    _check_inputs(target, sources)
    settings = settings or SolverSettings()
    tuner = _Tuner(tau, tuning or TuningSpec(), None)
    zero = {s.id: np.zeros(target.p) for s in sources}
    f = _pooled_fit(target, list(sources), zero, tau, tuner, settings)
    ids = frozenset(zero)
    return TransferEstimate(f.beta, zero, ids, ids, ids, {}, tuner.used, rounds=1,
                            converged=f.converged, fits={"pooled": f})
