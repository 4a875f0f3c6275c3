"""Simulation designs: Toeplitz covariates, shifted residual laws, contrasts.

Every random component draws from its own generator seeded by
``derive_seed(config.seed, <component tags>)``, so a scenario is a pure
function of its config and components do not disturb each other.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.optimize import bisect

from .core import Role, Study, read_study_csv, validate_tau, write_study_csv
from .seeding import derive_seed

TARGET_ID = "target"


def source_id(k: int) -> str:
    return f"source{k}"


class ResidualLaw(str, enum.Enum):
    NORMAL = "Normal"
    CAUCHY = "Cauchy"
    MIXED = "MixedGaussian"
    NOISY = "Noisy"
    T3 = "StudentT3"


BENIGN_LAWS = frozenset({ResidualLaw.NORMAL, ResidualLaw.T3})


class ModelType(str, enum.Enum):
    HOMOGENEOUS = "Homogeneous"
    HETEROGENEOUS = "Heterogeneous"


# --- covariates -------------------------------------------------------------

def sample_toeplitz_gaussian(n: int, p: int, rho: float, seed: int) -> np.ndarray:
    """Rows N(0, Sigma) with Sigma_ij = rho^|i-j|, by the AR(1) recursion."""
    if not abs(rho) < 1:
        raise ValueError(f"|rho| must be < 1, got {rho}")
    z = np.random.default_rng(seed).standard_normal((n, p))
    c = math.sqrt(1.0 - rho * rho)
    X = np.empty((n, p))
    X[:, 0] = z[:, 0]
    for j in range(1, p):
        X[:, j] = rho * X[:, j - 1] + c * z[:, j]
    return X


def sample_covariate_shifted(n: int, p: int, rho: float, seed: int,
                             eps_scale: float = 0.3, return_eps: bool = False):
    """Rows N(0, Sigma + e e') with e ~ N(0, eps_scale^2 I) drawn once.

    Realized as Toeplitz draw + e * g0 with g0 ~ N(0, 1) per row; the Toeplitz
    part uses the same seed as :func:`sample_toeplitz_gaussian`.
    """
    X = sample_toeplitz_gaussian(n, p, rho, seed)
    rng = np.random.default_rng(derive_seed(seed, "covariate-shift"))
    eps = eps_scale * rng.standard_normal(p)
    g0 = rng.standard_normal(n)
    X = X + g0[:, None] * eps[None, :]
    return (X, eps) if return_eps else X


# --- residuals --------------------------------------------------------------

MIXED_MEAN = 3.0


def _mixed_sd(sd_mode: bool) -> float:
    return 0.5 if sd_mode else math.sqrt(0.5)


def mixed_cdf(x, tau: float, sd_mode: bool = False):
    sd = _mixed_sd(sd_mode)
    return tau * stats.norm.cdf((x + MIXED_MEAN) / sd) + (1 - tau) * stats.norm.cdf((x - MIXED_MEAN) / sd)


def residual_quantile_shift(law: ResidualLaw, tau: float, mixed_sd_mode: bool = False) -> float:
    """tau-quantile of the raw law; subtracting it puts the tau-quantile at 0."""
    tau = validate_tau(tau)
    law = ResidualLaw(law)
    if law is ResidualLaw.NORMAL:
        return float(stats.norm.ppf(tau))
    if law is ResidualLaw.CAUCHY:
        return 3.0 * math.tan(math.pi * (tau - 0.5))
    if law is ResidualLaw.NOISY:
        return 5.0 * float(stats.norm.ppf(tau))
    if law is ResidualLaw.T3:
        return float(stats.t.ppf(tau, 3))
    # mixed: mixing weight tau on the left component
    lo, hi = -MIXED_MEAN - 20.0, MIXED_MEAN + 20.0
    return float(bisect(lambda x: mixed_cdf(x, tau, mixed_sd_mode) - tau, lo, hi,
                        xtol=1e-13, rtol=4 * np.finfo(float).eps, maxiter=500))


def sample_residuals(law: ResidualLaw, tau: float, n: int, rng: np.random.Generator,
                     mixed_sd_mode: bool = False) -> np.ndarray:
    law = ResidualLaw(law)
    if law is ResidualLaw.NORMAL:
        raw = rng.standard_normal(n)
    elif law is ResidualLaw.CAUCHY:
        raw = 3.0 * rng.standard_cauchy(n)
    elif law is ResidualLaw.NOISY:
        raw = 5.0 * rng.standard_normal(n)
    elif law is ResidualLaw.T3:
        raw = rng.standard_t(3, n)
    else:
        z = rng.random(n) < tau
        raw = np.where(z, -MIXED_MEAN, MIXED_MEAN) + _mixed_sd(mixed_sd_mode) * rng.standard_normal(n)
    return raw - residual_quantile_shift(law, tau, mixed_sd_mode)


# --- parameters -------------------------------------------------------------

def perturbation_size(p: int, s: int, H_size: int | None = None) -> int:
    """|H|: 50 by default; a value that does not fit in p raises."""
    h = 50 if H_size is None else int(H_size)
    if p < s // 2 + h:
        raise ValueError(
            f"p={p} is too small for |H|={h} (needs p >= s/2 + |H|); "
            f"pass H_size={min(50, p // 4)} for a desk-scale design")
    return h


def build_parameter_shift(p: int, s: int, h1: float, informative: bool, seed: int,
                          beta_star=None, H_size: int | None = None,
                          delta1: float | None = None) -> np.ndarray:
    """Source coefficients w = beta* + (h1/100 or h1/10) * r * 1{H u [s/2]}.

    ``delta1`` replaces the magnitude of the first contrast coordinate
    (sign kept from the Rademacher draw).
    """
    h = perturbation_size(p, s, H_size)
    if beta_star is None:
        beta_star = np.zeros(p)
    rng = np.random.default_rng(seed)
    half = s // 2
    H = rng.choice(np.arange(half, p), size=h, replace=False)
    r = rng.choice(np.array([-1.0, 1.0]), size=p)
    mask = np.zeros(p, dtype=bool)
    mask[:half] = True
    mask[H] = True
    mag = h1 / 100.0 if informative else h1 / 10.0
    delta = np.where(mask, mag * r, 0.0)
    if delta1 is not None:
        delta[0] = abs(delta1) * r[0]
    if h1 > 0 and delta1 is None:
        l1 = float(np.sum(np.abs(delta)))
        if informative and not l1 < h1:
            raise ValueError(f"informative contrast l1 {l1} is not below h1={h1}")
        if not informative and not l1 > h1:
            raise ValueError(f"non-informative contrast l1 {l1} is not above h1={h1}")
    return np.asarray(beta_star, dtype=np.float64) + delta


# --- scenarios --------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioConfig:
    p: int = 500
    s: int = 10
    n0: int = 200
    K: int = 5
    n_k: tuple | None = None            # per-source sizes; None: 100 benign / 200 divergent
    tau: float = 0.5
    model_type: ModelType = ModelType.HOMOGENEOUS
    beta_star_value: float = 1.0
    rho: float = 0.7
    covariate_shift: bool = True
    h1: float = 5.0
    informative_ids: tuple = (1, 2, 3, 4, 5)
    residual_laws: dict | None = None   # {k: law}; None: random per source
    divergent_law: ResidualLaw = ResidualLaw.CAUCHY
    benign_law: ResidualLaw = ResidualLaw.NORMAL
    divergent_prob: float = 0.5
    H_size: int | None = None
    delta1: float | None = None
    mixed_sd_mode: bool = False
    noise_free: bool = False            # test hook: all residuals zero
    test_n: int | None = None           # rows of the held-out design (default n0)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "model_type", ModelType(self.model_type))
        object.__setattr__(self, "divergent_law", ResidualLaw(self.divergent_law))
        object.__setattr__(self, "benign_law", ResidualLaw(self.benign_law))
        object.__setattr__(self, "informative_ids", tuple(sorted(int(k) for k in self.informative_ids)))
        if self.n_k is not None:
            object.__setattr__(self, "n_k", tuple(int(v) for v in self.n_k))
        if self.residual_laws is not None:
            object.__setattr__(self, "residual_laws",
                               {int(k): ResidualLaw(v) for k, v in self.residual_laws.items()})
        validate_tau(self.tau)
        if not (1 <= self.s <= self.p):
            raise ValueError("need 1 <= s <= p")
        if self.n0 < 1 or self.K < 0:
            raise ValueError("n0 must be >= 1 and K >= 0")
        if any(not 1 <= k <= self.K for k in self.informative_ids):
            raise ValueError(f"informative_ids must lie in 1..{self.K}")
        if self.n_k is not None and (len(self.n_k) != self.K or min(self.n_k, default=1) < 1):
            raise ValueError("n_k needs K positive entries")
        if self.residual_laws is not None and set(self.residual_laws) != set(range(1, self.K + 1)):
            raise ValueError("residual_laws must name every source 1..K")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model_type"] = self.model_type.value
        d["divergent_law"] = self.divergent_law.value
        d["benign_law"] = self.benign_law.value
        d["informative_ids"] = list(self.informative_ids)
        d["n_k"] = None if self.n_k is None else list(self.n_k)
        if self.residual_laws is not None:
            d["residual_laws"] = {str(k): v.value for k, v in sorted(self.residual_laws.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        if d.get("residual_laws") is not None:
            d["residual_laws"] = {int(k): v for k, v in d["residual_laws"].items()}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**d)

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return replace(self, seed=seed)


@dataclass
class GeneratedScenario:
    config: ScenarioConfig
    target: Study
    sources: list
    beta_star: np.ndarray
    w: dict
    laws: dict
    oracle_c_h1: frozenset
    oracle_c_h2: frozenset
    oracle_c_h: frozenset
    X_test: np.ndarray
    metadata: dict = field(default_factory=dict)

    def source(self, sid: str) -> Study:
        for s in self.sources:
            if s.id == sid:
                return s
        raise KeyError(sid)


def _laws(cfg: ScenarioConfig) -> dict:
    if cfg.residual_laws is not None:
        return dict(cfg.residual_laws)
    out = {}
    for k in range(1, cfg.K + 1):
        u = np.random.default_rng(derive_seed(cfg.seed, "divergent", k)).random()
        out[k] = cfg.divergent_law if u < cfg.divergent_prob else cfg.benign_law
    return out


def _response(cfg, X, w, law, rng):
    if cfg.noise_free:
        eps = np.zeros(X.shape[0])
    else:
        eps = sample_residuals(law, cfg.tau, X.shape[0], rng, cfg.mixed_sd_mode)
    if cfg.model_type is ModelType.HETEROGENEOUS:
        eps = np.abs(X[:, 0]) * eps
    return X @ w + eps


def generate_scenario(cfg: ScenarioConfig) -> GeneratedScenario:
    p, s = cfg.p, cfg.s
    beta = np.zeros(p)
    beta[:s] = cfg.beta_star_value
    laws = _laws(cfg)
    seed = cfg.seed

    X0 = sample_toeplitz_gaussian(cfg.n0, p, cfg.rho, derive_seed(seed, "x", 0))
    y0 = _response(cfg, X0, beta, ResidualLaw.NORMAL,
                   np.random.default_rng(derive_seed(seed, "eps", 0)))
    target = Study(TARGET_ID, X0, y0, Role.TARGET)
    X_test = sample_toeplitz_gaussian(cfg.test_n or cfg.n0, p, cfg.rho,
                                      derive_seed(seed, "x-test"))

    H_size = None
    sources, w = [], {}
    c_h1, c_h2 = set(), set()
    for k in range(1, cfg.K + 1):
        sid = source_id(k)
        law = laws[k]
        inf = k in cfg.informative_ids
        if cfg.n_k is not None:
            nk = cfg.n_k[k - 1]
        else:
            nk = 100 if law in BENIGN_LAWS else 200
        H_size = cfg.H_size if cfg.H_size is not None else 50
        wk = build_parameter_shift(p, s, cfg.h1, inf, derive_seed(seed, "w", k), beta,
                                   H_size, cfg.delta1)
        xs = derive_seed(seed, "x", k)
        if cfg.covariate_shift:
            Xk = sample_covariate_shifted(nk, p, cfg.rho, xs)
        else:
            Xk = sample_toeplitz_gaussian(nk, p, cfg.rho, xs)
        yk = _response(cfg, Xk, wk, law, np.random.default_rng(derive_seed(seed, "eps", k)))
        sources.append(Study(sid, Xk, yk, Role.SOURCE))
        w[sid] = wk
        if inf:
            c_h1.add(sid)
        if law in BENIGN_LAWS:
            c_h2.add(sid)
    c_h1, c_h2 = frozenset(c_h1), frozenset(c_h2)
    return GeneratedScenario(
        cfg, target, sources, beta, w, {source_id(k): v for k, v in laws.items()},
        c_h1, c_h2, c_h1 & c_h2, X_test, {"H_size": H_size if cfg.K else None})


def desk_H_size(p: int, s: int) -> int:
    """Largest |H| <= 50 that also satisfies |H| <= p/4 and fits in p."""
    return max(1, min(50, p // 4, p - s // 2))


# --- serialization ----------------------------------------------------------

def save_scenario(sc: GeneratedScenario, directory) -> Path:
    """Write one CSV per study plus ``scenario.json`` describing truth and config."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for st in [sc.target] + list(sc.sources):
        name = f"{st.id}.csv"
        write_study_csv(st, d / name)
        files[st.id] = name
    np.savetxt(d / "X_test.csv", sc.X_test, delimiter=",", fmt="%.17g")
    side = {
        "format": "transqr-scenario/1",
        "config": sc.config.to_dict(),
        "files": files,
        "beta_star": sc.beta_star.tolist(),
        "w": {k: v.tolist() for k, v in sc.w.items()},
        "laws": {k: v.value for k, v in sc.laws.items()},
        "oracle_c_h1": sorted(sc.oracle_c_h1),
        "oracle_c_h2": sorted(sc.oracle_c_h2),
        "oracle_c_h": sorted(sc.oracle_c_h),
        "metadata": sc.metadata,
    }
    path = d / "scenario.json"
    path.write_text(json.dumps(side, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_scenario(directory) -> GeneratedScenario:
    d = Path(directory)
    side = json.loads((d / "scenario.json").read_text(encoding="utf-8"))
    cfg = ScenarioConfig.from_dict(side["config"])
    target = read_study_csv(d / side["files"][TARGET_ID], TARGET_ID, Role.TARGET)
    sources = [read_study_csv(d / f, sid, Role.SOURCE)
               for sid, f in sorted(side["files"].items()) if sid != TARGET_ID]
    sources.sort(key=lambda s: int(s.id[len("source"):]))
    X_test = np.loadtxt(d / "X_test.csv", delimiter=",", ndmin=2)
    return GeneratedScenario(
        cfg, target, sources, np.array(side["beta_star"]),
        {k: np.array(v) for k, v in side["w"].items()},
        {k: ResidualLaw(v) for k, v in side["laws"].items()},
        frozenset(side["oracle_c_h1"]), frozenset(side["oracle_c_h2"]),
        frozenset(side["oracle_c_h"]), X_test, side.get("metadata", {}))
