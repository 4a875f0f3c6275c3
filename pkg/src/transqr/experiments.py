"""Monte-Carlo experiment recipes: a scenario grid crossed with methods and replications.

A recipe names a base ScenarioConfig, an optional list of grid cells (each a
label plus field overrides), the methods to run and the replication count.
Every replication draws one dataset per cell; all methods of that
replication see the same data, so comparisons between methods are paired.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
import time
from dataclasses import dataclass, field, replace
from functools import partial
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from ._parallel import ordered_map
from .core import compute_metrics
from .inference import InferenceSettings, debias
from .qc import QcSettings, quality_control
from .seeding import derive_seed
from .simgen import ScenarioConfig, generate_scenario
from .solver import SolverSettings
from .transfer import (DetectionThresholds, OracleSetSpec, TuningSpec, fit_naive_pooling,
                       fit_transfer, fit_with_known_set)


class Method(str, enum.Enum):
    L1QR = "L1QR"
    POOLING = "Pooling"                  # joint transfer fit on every source
    NAIVE_POOLING = "NaivePooling"       # plain l1-QR on the stacked data
    ORACLE_SET = "OracleSet"             # joint fit on the oracle transferable set
    TRANSQR = "TransQR"                  # detection, then joint fit on the detected set
    ORACLE_PS = "OraclePS"               # joint fit on the parameter-shift set only
    DEBIAS_TAR = "Debias_tar"
    DEBIAS_TRANS = "Debias_trans"
    DEBIAS_TRANS_TAR = "Debias_trans_tar"
    DEBIAS_QC = "Debias_qc"
    TRANSQR_2STEP = "TransQR_2step"
    TRANSSQR_2STEP = "TransSQR_2step"


ESTIMATION = (Method.L1QR, Method.POOLING, Method.NAIVE_POOLING, Method.ORACLE_SET,
              Method.TRANSQR, Method.ORACLE_PS)
INFERENCE = (Method.DEBIAS_TAR, Method.DEBIAS_TRANS, Method.DEBIAS_TRANS_TAR, Method.DEBIAS_QC)
EXTERNAL = (Method.TRANSQR_2STEP, Method.TRANSSQR_2STEP)

# user-supplied implementations of the external two-step baselines:
# fn(scenario, tau, seed) -> beta_hat
_external_impls: dict = {}


class RecipeError(ValueError):
    pass


class ExternalMethodError(NotImplementedError):
    pass


def register_external(method, fn) -> None:
    """Plug in an implementation for one of the external two-step baselines."""
    m = Method(method)
    if m not in EXTERNAL:
        raise ValueError(f"{m.value} is not an external baseline")
    _external_impls[m] = fn


@dataclass(frozen=True)
class ExperimentRecipe:
    name: str
    scenario: ScenarioConfig
    methods: tuple
    replications: int
    metrics: tuple = ("estimation",)
    output_path: str | None = None
    seed: int = 0
    grid: tuple = ()                     # ((label, {field: value}), ...)
    inference: dict = field(default_factory=dict)
    qc: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)
    debias_set: str = "oracle"           # "oracle" (C_h known) or "detected"

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(Method(m) for m in self.methods))
        if not self.methods:
            raise RecipeError("methods must be non-empty")
        if self.replications < 1:
            raise RecipeError("replications must be >= 1")
        if self.debias_set not in ("oracle", "detected"):
            raise RecipeError("debias_set must be 'oracle' or 'detected'")
        for m in self.methods:
            if m in EXTERNAL and m not in _external_impls:
                raise ExternalMethodError(
                    f"{m.value} is an external two-step baseline that this package does not "
                    f"implement; register one with transqr.experiments.register_external")
        for label, over in self.cells():
            try:
                self.cell_config(over)
            except (TypeError, ValueError) as e:
                raise RecipeError(f"grid cell {label!r}: {e}") from None

    def cells(self):
        return self.grid or (("base", {}),)

    def cell_config(self, overrides: dict) -> ScenarioConfig:
        d = self.scenario.to_dict()
        d.update(overrides)
        return ScenarioConfig.from_dict(d)


def recipe_from_dict(d: dict, base_dir=None) -> ExperimentRecipe:
    d = dict(d)
    known = set(ExperimentRecipe.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise RecipeError(f"unknown recipe fields: {sorted(unknown)}")
    for key in ("name", "scenario", "methods", "replications"):
        if key not in d:
            raise RecipeError(f"recipe is missing {key!r}")
    d["scenario"] = ScenarioConfig.from_dict(d["scenario"])
    d["methods"] = tuple(d["methods"])
    d["metrics"] = tuple(d.get("metrics", ("estimation",)))
    grid = []
    for cell in d.get("grid", ()) or ():
        cell = dict(cell)
        label = str(cell.pop("label", f"cell{len(grid)}"))
        grid.append((label, cell))
    d["grid"] = tuple(grid)
    return ExperimentRecipe(**d)


def load_recipe(path) -> ExperimentRecipe:
    """Read a YAML recipe from a path or the name of a bundled recipe."""
    p = Path(path)
    if not p.exists():
        name = str(path)
        if not name.endswith(".yaml"):
            name += ".yaml"
        res = resources.files("transqr").joinpath("recipes", name)
        if not res.is_file():
            raise RecipeError(f"no recipe file or bundled recipe named {path!r}")
        text = res.read_text()
    else:
        text = p.read_text()
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise RecipeError(f"recipe is not valid YAML: {e}") from None
    if not isinstance(d, dict):
        raise RecipeError("recipe must be a mapping")
    return recipe_from_dict(d)


def bundled_recipes() -> list[str]:
    root = resources.files("transqr").joinpath("recipes")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


# ------------------------------------------------------------------ execution

RECORD_FIELDS = ("recipe", "cell", "method", "replication", "seed", "status", "error",
                 "l1_error", "l2_error", "prediction_error", "alpha_hat", "sigma_hat_sq",
                 "ci_lower", "ci_upper", "ci_length", "covered", "detected_set",
                 "detected_correct", "qc_decision", "qc_p_value", "seconds")
NUMERIC = ("l1_error", "l2_error", "prediction_error", "alpha_hat", "sigma_hat_sq",
           "ci_lower", "ci_upper", "ci_length")


def replication_seed(master: int, cell: str, replication: int) -> int:
    return derive_seed(master, "replication", cell, replication)


class _Context:
    """Lazily computed fits shared by the methods of one replication."""

    def __init__(self, recipe, sc, seed):
        self.recipe = recipe
        self.sc = sc
        self.tau = sc.config.tau
        self.tuning = TuningSpec(seed=derive_seed(seed, "tuning"))
        self.solver = SolverSettings()
        self.inf = InferenceSettings(**{"seed": derive_seed(seed, "inference"), **recipe.inference})
        self.thresholds = DetectionThresholds(**recipe.thresholds)
        self._cache = {}
        self.states = {}

    def get(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def known(self, ids):
        sc = self.sc
        ids = frozenset(ids)
        return self.get(("known", ids), lambda: fit_with_known_set(
            sc.target, sc.sources, OracleSetSpec(ids), self.tau, settings=self.solver,
            tuning=self.tuning))

    def transqr(self):
        sc = self.sc
        return self.get("transqr", lambda: fit_transfer(
            sc.target, sc.sources, self.tau, self.thresholds, settings=self.solver,
            tuning=self.tuning))

    def debias_set(self):
        if self.recipe.debias_set == "detected":
            return self.transqr()
        return self.known(self.sc.oracle_c_h)


def _estimate(ctx: _Context, m: Method):
    sc = ctx.sc
    if m is Method.L1QR:
        return ctx.known(())
    if m is Method.POOLING:
        return ctx.known(s.id for s in sc.sources)
    if m is Method.NAIVE_POOLING:
        return ctx.get("naive", lambda: fit_naive_pooling(sc.target, sc.sources, ctx.tau,
                                                          ctx.solver, ctx.tuning))
    if m is Method.ORACLE_SET:
        return ctx.known(sc.oracle_c_h)
    if m is Method.ORACLE_PS:
        return ctx.known(sc.oracle_c_h1)
    if m is Method.TRANSQR:
        return ctx.transqr()
    raise AssertionError(m)


def _run_method(ctx: _Context, m: Method, rec: dict):
    sc = ctx.sc
    if m in EXTERNAL:
        beta = np.asarray(_external_impls[m](sc, ctx.tau, rec["seed"]), dtype=np.float64)
        rec.update(compute_metrics(beta, sc.beta_star, sc.X_test).as_dict())
        return
    if m in ESTIMATION:
        est = _estimate(ctx, m)
        rec.update(compute_metrics(est.beta_hat, sc.beta_star, sc.X_test).as_dict())
        if m is Method.TRANSQR:
            rec["detected_set"] = " ".join(sorted(est.detected_set))
            rec["detected_correct"] = int(est.detected_set == sc.oracle_c_h)
        return
    j = ctx.inf.coefficient_index - 1
    truth = float(sc.beta_star[j])
    if m is Method.DEBIAS_TAR:
        res = debias(sc.target, [], ctx.known(()), ctx.tau, ctx.inf, ctx.solver, states={})
    elif m is Method.DEBIAS_TRANS_TAR:
        res = debias(sc.target, [], ctx.debias_set(), ctx.tau, ctx.inf, ctx.solver,
                     states=ctx.states)
    elif m is Method.DEBIAS_TRANS:
        est = ctx.debias_set()
        mem = [s for s in sc.sources if s.id in est.detected_set]
        res = debias(sc.target, mem, est, ctx.tau, ctx.inf, ctx.solver, states=ctx.states)
    else:
        est = ctx.debias_set()
        qs = QcSettings(**{"seed": derive_seed(rec["seed"], "qc"), **ctx.recipe.qc})
        report, res = quality_control(sc.target, sc.sources, est, ctx.tau, qs, ctx.inf,
                                      ctx.solver, workers=1)
        rec["qc_decision"] = report.decision.value
        rec["qc_p_value"] = report.p_value
    rec.update(alpha_hat=res.alpha_hat, sigma_hat_sq=res.sigma_hat_sq, ci_lower=res.ci_lower,
               ci_upper=res.ci_upper, ci_length=res.ci_length, covered=int(res.covers(truth)))
    rec["detected_set"] = " ".join(sorted(res.study_ids[1:]))


def run_replication(task, recipe: ExperimentRecipe, timing: bool = False) -> list[dict]:
    """All methods of one (cell, replication); failures are captured per method."""
    ci, rep = task
    label, over = recipe.cells()[ci]
    seed = replication_seed(recipe.seed, label, rep)
    base = {"recipe": recipe.name, "cell": label, "replication": rep, "seed": seed}
    try:
        sc = generate_scenario(replace(recipe.cell_config(over), seed=seed))
        ctx = _Context(recipe, sc, seed)
    except Exception as e:  # noqa: BLE001 - recorded, not raised
        return [dict(base, method=m.value, status="failed", error=f"{type(e).__name__}: {e}")
                for m in recipe.methods]
    out = []
    for m in recipe.methods:
        rec = dict(base, method=m.value, status="ok", error="")
        t0 = time.perf_counter()
        try:
            _run_method(ctx, m, rec)
        except Exception as e:  # noqa: BLE001
            rec.update(status="failed", error=f"{type(e).__name__}: {e}")
        if timing:
            rec["seconds"] = round(time.perf_counter() - t0, 3)
        out.append(rec)
    return out


def run_experiment(recipe: ExperimentRecipe, workers: int | None = None,
                   timing: bool = False) -> list[dict]:
    tasks = [(ci, r) for ci in range(len(recipe.cells())) for r in range(recipe.replications)]
    fn = partial(run_replication, recipe=recipe, timing=timing)
    return [rec for recs in ordered_map(fn, tasks, workers) for rec in recs]


def aggregate(records: list[dict]) -> dict:
    """Per (cell, method): counts, means and sds of numeric metrics, proportions."""
    groups = {}
    for r in records:
        groups.setdefault((r["cell"], r["method"]), []).append(r)
    out = []
    for (cell, method), rs in groups.items():
        ok = [r for r in rs if r["status"] == "ok"]
        row = {"cell": cell, "method": method, "n": len(rs), "n_ok": len(ok),
               "n_failed": len(rs) - len(ok)}
        for k in NUMERIC:
            v = np.array([r[k] for r in ok if r.get(k) is not None], dtype=np.float64)
            if v.size:
                row[f"{k}_mean"] = float(np.mean(v))
                row[f"{k}_sd"] = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
        for k, name in (("covered", "coverage"), ("detected_correct", "detection_rate")):
            v = [r[k] for r in ok if r.get(k) is not None]
            if v:
                row[name] = float(np.mean(v))
        d = [r["qc_decision"] for r in ok if r.get("qc_decision")]
        if d:
            row["target_only_rate"] = float(np.mean([x == "TargetOnlyDebias" for x in d]))
        out.append(row)
    return {"groups": out}


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def records_csv(records: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_FIELDS)
    for r in records:
        w.writerow([_fmt(r.get(k)) for k in RECORD_FIELDS])
    return buf.getvalue()


def success_fraction(records: list[dict]) -> float:
    if not records:
        return 1.0
    return sum(r["status"] == "ok" for r in records) / len(records)


def write_outputs(recipe: ExperimentRecipe, records: list[dict], directory) -> dict:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / f"{recipe.name}_records.csv").write_text(records_csv(records))
    agg = {"schema_version": 1, "recipe": recipe.name, "seed": recipe.seed,
           "replications": recipe.replications, "methods": [m.value for m in recipe.methods],
           "success_fraction": success_fraction(records), **aggregate(records)}
    (d / f"{recipe.name}_aggregate.json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
    return agg
