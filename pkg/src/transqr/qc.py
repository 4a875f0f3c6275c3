"""Quality control for transfer debiasing.

Sources whose estimated first contrast is too large are dropped, the debiased
estimate is replicated by a study-stratified pair bootstrap, and a
Shapiro-Wilk test on the replicates decides between pooled (transfer)
debiasing and target-only debiasing.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import partial

import numpy as np
from scipy.special import ndtr, ndtri

from ._parallel import ordered_map
from .core import Study, validate_tau
from .inference import DebiasedResult, InferenceSettings, debias
from .seeding import derive_seed
from .solver import SolverError, SolverSettings


class QcError(RuntimeError):
    pass


class Decision(str, enum.Enum):
    TRANSFER = "TransferDebias"
    TARGET_ONLY = "TargetOnlyDebias"


@dataclass(frozen=True)
class QcSettings:
    R: int = 200
    sw_alpha: float = 0.05
    contrast_cutoff: float = 0.05
    max_missing_frac: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.R < 20:
            raise ValueError("R must be >= 20")
        if not 0 < self.sw_alpha < 1:
            raise ValueError("sw_alpha must lie in (0, 1)")
        if not self.contrast_cutoff > 0:
            raise ValueError("contrast_cutoff must be positive")


@dataclass
class QcReport:
    pruned_set: frozenset
    replicates: np.ndarray
    sw_statistic: float
    p_value: float
    decision: Decision
    missing: int = 0
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"pruned_set": sorted(self.pruned_set),
                "sw_statistic": None if math.isnan(self.sw_statistic) else self.sw_statistic,
                "p_value": None if math.isnan(self.p_value) else self.p_value,
                "decision": self.decision.value, "missing": self.missing,
                "replicates": [None if not np.isfinite(v) else float(v) for v in self.replicates]}


# ---------------------------------------------------------------- Shapiro-Wilk

_C1 = (0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056)
_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_C3 = (0.5440, -0.39978, 0.025054, -6.714e-4)
_C4 = (1.3822, -0.77857, 0.062767, -0.0020322)
_C5 = (-1.5861, -0.31082, -0.083751, 0.0038915)
_C6 = (-0.4803, -0.082676, 0.0030302)
_G = (-2.273, 0.459)


def _poly(c, x):
    return sum(ci * x ** i for i, ci in enumerate(c))


def sw_coefficients(n: int) -> np.ndarray:
    """Royston's approximate Shapiro-Wilk weights for an ascending sample of size n."""
    if n < 3:
        raise ValueError("need n >= 3")
    a = np.zeros(n)
    if n == 3:
        a[0], a[2] = -math.sqrt(0.5), math.sqrt(0.5)
        return a
    m = ndtri((np.arange(1, n + 1) - 0.375) / (n + 0.25))
    summ2 = float(m @ m)
    ssumm2 = math.sqrt(summ2)
    u = 1.0 / math.sqrt(n)
    an = m[-1] / ssumm2 + _poly(_C1, u)
    if n > 5:
        an1 = m[-2] / ssumm2 + _poly(_C2, u)
        eps = (summ2 - 2 * m[-1] ** 2 - 2 * m[-2] ** 2) / (1 - 2 * an ** 2 - 2 * an1 ** 2)
        a[:] = m / math.sqrt(eps)
        a[-1], a[-2], a[0], a[1] = an, an1, -an, -an1
    else:
        eps = (summ2 - 2 * m[-1] ** 2) / (1 - 2 * an ** 2)
        a[:] = m / math.sqrt(eps)
        a[-1], a[0] = an, -an
    return a


def shapiro_wilk(sample) -> tuple[float, float]:
    """Shapiro-Wilk W and p-value (Royston's AS R94 normalizing transforms)."""
    x = np.sort(np.asarray(sample, dtype=np.float64).ravel())
    n = x.size
    if not 3 <= n <= 5000:
        raise ValueError(f"Shapiro-Wilk needs 3 <= n <= 5000, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("sample contains non-finite values")
    if x[-1] - x[0] <= 0:
        raise ValueError("sample has zero variance")
    a = sw_coefficients(n)
    xc = (x - x.mean()) / (x[-1] - x[0])
    ssx = float(xc @ xc)
    sax = float(a @ xc)
    w = min(1.0, sax * sax / (ssx * float(a @ a)))
    if n == 3:
        p = (6.0 / math.pi) * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75)))
        return w, float(min(1.0, max(p, 0.0)))
    w1 = 1.0 - w
    if w1 <= 0:
        return w, 1.0
    y = math.log(w1)
    if n <= 11:
        gamma = _poly(_G, n)
        if y >= gamma:
            return w, 1e-99
        y = -math.log(gamma - y)
        mu, sd = _poly(_C3, n), math.exp(_poly(_C4, n))
    else:
        ln = math.log(n)
        mu, sd = _poly(_C5, ln), math.exp(_poly(_C6, ln))
    return w, float(1.0 - ndtr((y - mu) / sd))


# ------------------------------------------------------------------ procedure

def pre_control(transfer_estimate, cutoff: float, coefficient_index: int = 1,
                exclude=()) -> frozenset:
    """Detected set minus sources with |delta_j| > cutoff or excluded by prior knowledge."""
    if not cutoff > 0:
        raise ValueError("cutoff must be positive")
    j = coefficient_index - 1
    out = set()
    for sid in transfer_estimate.detected_set:
        if sid in exclude:
            continue
        d = transfer_estimate.contrasts.get(sid)
        if d is None or abs(float(d[j])) <= cutoff:
            out.add(sid)
    return frozenset(out)


def replicate_seeds(settings: QcSettings) -> list[int]:
    return [derive_seed(settings.seed, "bootstrap", r) for r in range(settings.R)]


def _resample(study: Study, seed: int) -> Study:
    rng = np.random.default_rng(derive_seed(seed, study.id))
    return study.take(rng.integers(0, study.n, study.n))


def _replicate(seed, target, sources, transfer_estimate, tau, inference_settings,
               solver_settings, resample):
    for attempt in (seed, derive_seed(seed, "retry")):
        try:
            t = _resample(target, attempt) if resample else target
            ss = [_resample(s, attempt) if resample else s for s in sources]
            a = debias(t, ss, transfer_estimate, tau, inference_settings, solver_settings).alpha_hat
        except (ArithmeticError, SolverError, ValueError, np.linalg.LinAlgError):
            continue
        if np.isfinite(a):
            return float(a)
    return float("nan")


def pair_bootstrap_debias(target: Study, sources_in_set, transfer_estimate, tau: float,
                          settings: QcSettings | None = None,
                          inference_settings: InferenceSettings | None = None,
                          solver_settings: SolverSettings | None = None,
                          seeds=None, resample: bool = True, workers: int | None = None):
    """Debiased estimates on R within-study pair-bootstrap resamples.

    The pilot coefficients and contrasts of ``transfer_estimate`` are held
    fixed; densities, projections, post-selected fits and the score root are
    recomputed on every resample. Replicate r depends only on ``seeds[r]``.
    A failing replicate is retried once with a derived seed and otherwise
    recorded as NaN; more than ``max_missing_frac`` missing raises QcError.
    ``resample=False`` is a test hook that reuses the original rows.
    """
    tau = validate_tau(tau)
    settings = settings or QcSettings()
    seeds = replicate_seeds(settings) if seeds is None else list(seeds)
    sources = list(sources_in_set)
    if not resample:
        a = _replicate(0, target, sources, transfer_estimate, tau, inference_settings,
                       solver_settings, False)
        return np.full(len(seeds), a)
    fn = partial(_replicate, target=target, sources=sources, transfer_estimate=transfer_estimate,
                 tau=tau, inference_settings=inference_settings,
                 solver_settings=solver_settings, resample=True)
    out = np.array(ordered_map(fn, seeds, workers), dtype=np.float64)
    missing = int(np.sum(~np.isfinite(out)))
    if missing > settings.max_missing_frac * len(seeds):
        raise QcError(f"{missing} of {len(seeds)} bootstrap replicates failed")
    return out


def quality_control(target: Study, sources, transfer_estimate, tau: float,
                    settings: QcSettings | None = None,
                    inference_settings: InferenceSettings | None = None,
                    solver_settings: SolverSettings | None = None,
                    exclude=(), workers: int | None = None) -> tuple[QcReport, DebiasedResult]:
    """Pre-control, bootstrap normality gate, then the chosen debiased estimate.

    ``sources`` must contain every study of the transfer estimate's detected
    set. An empty pruned set skips the bootstrap (statistic and p-value NaN)
    and falls back to target-only debiasing.
    """
    settings = settings or QcSettings()
    inference_settings = inference_settings or InferenceSettings()
    by_id = {s.id: s for s in sources}
    missing = set(transfer_estimate.detected_set) - set(by_id)
    if missing:
        raise ValueError(f"sources missing for detected studies: {sorted(missing)}")
    kept = pre_control(transfer_estimate, settings.contrast_cutoff,
                       inference_settings.coefficient_index, exclude)
    members = [by_id[k] for k in sorted(kept)]
    if not members:
        report = QcReport(kept, np.zeros(0), float("nan"), float("nan"), Decision.TARGET_ONLY,
                          notes=["pruned set empty; bootstrap skipped"])
        return report, debias(target, [], transfer_estimate, tau, inference_settings,
                              solver_settings)
    reps = pair_bootstrap_debias(target, members, transfer_estimate, tau, settings,
                                 inference_settings, solver_settings, workers=workers)
    ok = reps[np.isfinite(reps)]
    if ok.size >= 3 and np.ptp(ok) > 0:
        w, pv = shapiro_wilk(ok)
    else:
        # a degenerate bootstrap distribution is as non-normal as it gets
        w, pv = float("nan"), 0.0
    decision = Decision.TARGET_ONLY if pv < settings.sw_alpha else Decision.TRANSFER
    report = QcReport(kept, reps, w, pv, decision, missing=int(reps.size - ok.size))
    chosen = [] if decision is Decision.TARGET_ONLY else members
    return report, debias(target, chosen, transfer_estimate, tau, inference_settings,
                          solver_settings)
