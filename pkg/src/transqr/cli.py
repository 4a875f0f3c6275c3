"""Command-line front end.

    transqr fit --target t.csv --source s1.csv --source s2.csv --tau 0.5 -o fit.json
    transqr detect --target t.csv --source s1.csv --tau 0.5
    transqr infer --target t.csv --source s1.csv --fit fit.json --index 1 --qc on
    transqr simulate --config scenario.yaml --set p=200 -o data/
    transqr experiment motivating --set p=200 --replications 30 -o results/

Exit codes: 0 ok, 2 input error, 3 numerical failure, 4 partial experiment failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .core import Role, StudyFormatError, read_study_csv
from .experiments import (ExternalMethodError, RecipeError, bundled_recipes, load_recipe,
                          run_experiment, success_fraction, write_outputs)
from .inference import DegenerateVarianceError, InferenceSettings, debias
from .qc import QcError, QcSettings, quality_control
from .simgen import ScenarioConfig, generate_scenario, save_scenario
from .solver import SolverError, SolverSettings
from .transfer import (DetectionThresholds, OracleSetSpec, TransferEstimate, TuningSpec,
                       detect_transferable_set, fit_transfer, fit_with_known_set)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4
SCHEMA_VERSION = 1


class InputError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


# ------------------------------------------------------------------ helpers

def _floats(a):
    return [float(v) for v in np.asarray(a, dtype=np.float64).ravel()]


def _num(v):
    v = float(v)
    return None if math.isnan(v) else v


def _emit(obj, output):
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"
    if output:
        Path(output).parent.mkdir(parents=True, exist_ok=True)
        Path(output).write_text(text)
    else:
        sys.stdout.write(text)


def _load_studies(args):
    target = read_study_csv(args.target, id=Path(args.target).stem, role=Role.TARGET)
    sources = [read_study_csv(p, id=Path(p).stem, role=Role.SOURCE) for p in args.source or ()]
    ids = [target.id] + [s.id for s in sources]
    if len(set(ids)) != len(ids):
        raise InputError(f"study file names must be unique (ids come from them): {ids}")
    return target, sources


def _tau(args):
    if not 0 < args.tau < 1:
        raise InputError(f"--tau must lie in (0, 1), got {args.tau}")
    return args.tau


def _densities(est: TransferEstimate):
    return {k: {"value": d.value, "bandwidth": d.bandwidth, "n_inside": d.n_inside}
            for k, d in sorted(est.densities.items())}


def _fit_dict(est: TransferEstimate, args, target, sources) -> dict:
    return {
        "schema_version": SCHEMA_VERSION, "command": "fit", "tau": args.tau, "seed": args.seed,
        "t1": args.t1, "t2": args.t2, "rounds": args.rounds, "p": target.p,
        "target_id": target.id, "source_ids": [s.id for s in sources],
        "beta_hat": _floats(est.beta_hat),
        "contrasts": {k: _floats(v) for k, v in sorted(est.contrasts.items())},
        "detected_set": sorted(est.detected_set), "set_c1": sorted(est.set_c1),
        "set_c2": sorted(est.set_c2), "densities": _densities(est),
        "lambdas": {k: float(v) for k, v in sorted(est.lambdas_used.items())},
        "converged": bool(est.converged),
    }


def _run_fit(args, target, sources) -> TransferEstimate:
    tau = _tau(args)
    if args.rounds < 1:
        raise InputError("--rounds must be >= 1")
    tuning = TuningSpec(seed=args.seed)
    known = getattr(args, "known", None)
    if known is not None:
        ids = [k for k in known.split(",") if k]
        return fit_with_known_set(target, sources, OracleSetSpec(ids), tau, T=args.rounds,
                                  tuning=tuning)
    return fit_transfer(target, sources, tau, DetectionThresholds(args.t1, args.t2),
                        rounds=args.rounds, tuning=tuning)


# ------------------------------------------------------------------ commands

def cmd_fit(args) -> int:
    target, sources = _load_studies(args)
    est = _run_fit(args, target, sources)
    _emit(_fit_dict(est, args, target, sources), args.output)
    if not est.converged:
        raise NumericalError("solver did not converge within the iteration budget "
                             "(output written with converged=false)")
    return EXIT_OK


def cmd_detect(args) -> int:
    target, sources = _load_studies(args)
    tau = _tau(args)
    det = detect_transferable_set(target, sources, tau, DetectionThresholds(args.t1, args.t2),
                                  tuning=TuningSpec(seed=args.seed))
    _emit({"schema_version": SCHEMA_VERSION, "command": "detect", "tau": tau, "seed": args.seed,
           "t1": args.t1, "t2": args.t2, "detected_set": sorted(det.detected_set),
           "set_c1": sorted(det.set_c1), "set_c2": sorted(det.set_c2),
           "contrast_l1": {k: float(np.sum(np.abs(v))) for k, v in sorted(det.contrasts.items())},
           "c1_bound": args.t1 * math.sqrt(math.log(target.p) / target.n),
           "densities": _densities(det)}, args.output)
    return EXIT_OK


def _estimate_from_json(path, target, sources) -> TransferEstimate:
    try:
        d = json.loads(Path(path).read_text())
        beta = np.asarray(d["beta_hat"], dtype=np.float64)
        contrasts = {k: np.asarray(v, dtype=np.float64) for k, v in d["contrasts"].items()}
        det = frozenset(d["detected_set"])
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise InputError(f"cannot read fit JSON {path}: {e}") from None
    if beta.shape != (target.p,):
        raise InputError(f"fit has p={beta.size}, target has p={target.p}")
    missing = det - {s.id for s in sources}
    if missing:
        raise InputError(f"fit JSON references sources not given: {sorted(missing)}")
    return TransferEstimate(beta, contrasts, det, det, det)


def cmd_infer(args) -> int:
    target, sources = _load_studies(args)
    tau = _tau(args)
    if not 1 <= args.index <= target.p:
        raise InputError(f"--index {args.index} outside 1..{target.p}")
    if args.fit:
        est = _estimate_from_json(args.fit, target, sources)
    else:
        est = _run_fit(args, target, sources)
    inf = InferenceSettings(coefficient_index=args.index, seed=args.seed)
    out = {"schema_version": SCHEMA_VERSION, "command": "infer", "tau": tau, "seed": args.seed,
           "index": args.index, "qc": args.qc}
    if args.qc == "on":
        qs = QcSettings(R=args.bootstrap_r, seed=args.seed)
        report, res = quality_control(target, sources, est, tau, qs, inf)
        out.update(decision=report.decision.value, sw_p_value=_num(report.p_value),
                   sw_statistic=_num(report.sw_statistic), pruned_set=sorted(report.pruned_set),
                   bootstrap_missing=report.missing)
    else:
        members = [s for s in sources if s.id in est.detected_set]
        res = debias(target, members, est, tau, inf)
        out["decision"] = "TransferDebias"
    out.update(alpha_hat=res.alpha_hat, sigma_hat_sq=res.sigma_hat_sq,
               ci=[res.ci_lower, res.ci_upper], n_total=res.n_total,
               search_region=list(res.search_region), studies=list(res.study_ids),
               score_at_solution=res.score_at_solution)
    _emit(out, args.output)
    return EXIT_OK


def _parse_sets(pairs) -> dict:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise InputError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = yaml.safe_load(v)
    return out


def cmd_simulate(args) -> int:
    d = {}
    if args.config:
        try:
            d = yaml.safe_load(Path(args.config).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise InputError(f"cannot read config {args.config}: {e}") from None
        if not isinstance(d, dict):
            raise InputError("scenario config must be a mapping")
    d.update(_parse_sets(args.set))
    if args.seed is not None:
        d["seed"] = args.seed
    cfg = ScenarioConfig.from_dict(d)
    path = save_scenario(generate_scenario(cfg), args.output)
    sys.stdout.write(f"{path}\n")
    return EXIT_OK


def cmd_experiment(args) -> int:
    if args.list:
        sys.stdout.write("\n".join(bundled_recipes()) + "\n")
        return EXIT_OK
    if not args.recipe:
        raise InputError("a recipe path or bundled recipe name is required")
    recipe = load_recipe(args.recipe)
    sets = _parse_sets(args.set)
    if sets:
        scenario = ScenarioConfig.from_dict({**recipe.scenario.to_dict(), **sets})
        recipe = replace(recipe, scenario=scenario)
    if args.replications is not None:
        recipe = replace(recipe, replications=args.replications)
    if args.seed is not None:
        recipe = replace(recipe, seed=args.seed)
    if args.cells:
        keep = set(args.cells.split(","))
        grid = tuple(c for c in recipe.cells() if c[0] in keep)
        if not grid:
            raise InputError(f"no grid cell matches {args.cells!r}")
        recipe = replace(recipe, grid=grid)
    out = args.output or recipe.output_path or "."
    records = run_experiment(recipe, workers=args.threads, timing=args.timing)
    agg = write_outputs(recipe, records, out)
    frac = agg["success_fraction"]
    sys.stdout.write(f"{len(records)} cells, {frac:.1%} succeeded -> {out}\n")
    return EXIT_OK if frac >= 0.95 else EXIT_PARTIAL


# ------------------------------------------------------------------ parser

def _study_args(p, need_target=True):
    p.add_argument("--target", required=need_target, help="target study CSV (y, x1..xp)")
    p.add_argument("--source", action="append", default=[], help="source study CSV (repeatable)")
    p.add_argument("--tau", type=float, default=0.5, help="quantile level")
    p.add_argument("--seed", type=int, default=0, help="seed for simulated tuning parameters")
    p.add_argument("-o", "--output", help="output JSON path (default stdout)")


def _fit_args(p):
    p.add_argument("--t1", type=float, default=5.0, help="contrast threshold (default 5)")
    p.add_argument("--t2", type=float, default=0.3, help="density ratio threshold (default 0.3)")
    p.add_argument("--rounds", type=int, default=1, help="pooled/contrast rounds (default 1)")
    p.add_argument("--known", help="comma-separated source ids: skip detection and use this set")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="transqr", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="transfer estimate with source detection")
    _study_args(p)
    _fit_args(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("detect", help="screen sources into the transferable set")
    _study_args(p)
    p.add_argument("--t1", type=float, default=5.0)
    p.add_argument("--t2", type=float, default=0.3)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("infer", help="debiased estimate and confidence interval")
    _study_args(p)
    _fit_args(p)
    p.add_argument("--fit", help="fit JSON from `transqr fit` (otherwise fit inline)")
    p.add_argument("--index", type=int, default=1, help="1-based coefficient index")
    p.add_argument("--qc", choices=("on", "off"), default="off", help="bootstrap quality control")
    p.add_argument("--bootstrap-r", type=int, default=200, help="bootstrap replicates (>= 20)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("simulate", help="generate a scenario and write its CSVs")
    p.add_argument("--config", help="YAML file with ScenarioConfig fields")
    p.add_argument("--set", action="append", help="override a field: key=value (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("experiment", help="run a Monte-Carlo recipe")
    p.add_argument("recipe", nargs="?", help="recipe YAML path or bundled recipe name")
    p.add_argument("--list", action="store_true", help="list bundled recipes")
    p.add_argument("--set", action="append", help="override a scenario field: key=value")
    p.add_argument("--replications", type=int)
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--cells", help="comma-separated grid cell labels to run")
    p.add_argument("--threads", type=int, help="worker processes (default TRANSQR_THREADS)")
    p.add_argument("--timing", action="store_true", help="record per-cell wall time")
    p.add_argument("-o", "--output", help="output directory")
    p.set_defaults(func=cmd_experiment)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StudyFormatError as e:
        print(f"transqr: input error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, RecipeError, ExternalMethodError, FileNotFoundError, IndexError) as e:
        print(f"transqr: input error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, SolverError, DegenerateVarianceError, QcError,
            FloatingPointError) as e:
        print(f"transqr: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"transqr: input error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
