import csv
import io
import json
import math
from importlib import resources

import jsonschema
import numpy as np
import pytest
import yaml

import transqr.cli as cli
import transqr.experiments as ex
from transqr.cli import EXIT_INPUT, EXIT_NUMERIC, EXIT_OK, EXIT_PARTIAL, main
from transqr.core import Role, read_study_csv
from transqr.experiments import (ExperimentRecipe, ExternalMethodError, Method, RecipeError,
                                 bundled_recipes, load_recipe, recipe_from_dict, run_experiment,
                                 write_outputs)
from transqr.inference import InferenceSettings, debias
from transqr.transfer import TransferEstimate

SCENARIO = ["p=20", "s=3", "n0=60", "K=2", "n_k=[60, 60]", "H_size=12", "h1=1.0",
            "informative_ids=[1]", "residual_laws={1: Normal, 2: Cauchy}"]


def schema(name):
    return json.loads(resources.files("transqr").joinpath("schemas", f"{name}.schema.json").read_text())


def validate(obj, name):
    jsonschema.validate(obj, schema(name))


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    argv = ["simulate", "-o", str(d), "--seed", "3"]
    for s in SCENARIO:
        argv += ["--set", s]
    assert main(argv) == EXIT_OK
    return d


def study_args(data, sources=("source1", "source2")):
    argv = ["--target", str(data / "target.csv")]
    for s in sources:
        argv += ["--source", str(data / f"{s}.csv")]
    return argv


def run_json(capsys, argv, code=EXIT_OK):
    assert main(argv) == code
    return json.loads(capsys.readouterr().out)


# ---------------------------------------------------------------- simulate

def test_simulate_writes_valid_sidecar(data, tmp_path, capsys):
    side = json.loads((data / "scenario.json").read_text())
    validate(side, "scenario")
    assert side["config"]["p"] == 20 and side["config"]["seed"] == 3
    argv = ["simulate", "-o", str(tmp_path), "--seed", "3"]
    for s in SCENARIO:
        argv += ["--set", s]
    assert main(argv) == EXIT_OK
    for f in ("scenario.json", "target.csv", "source1.csv", "source2.csv", "X_test.csv"):
        assert (tmp_path / f).read_bytes() == (data / f).read_bytes()


def test_simulate_config_file_and_bad_set(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("p: 12\ns: 2\nn0: 20\nK: 0\ninformative_ids: []\n")
    assert main(["simulate", "--config", str(cfg), "--set", "n0=25", "-o", str(tmp_path / "o")]) == EXIT_OK
    assert read_study_csv(tmp_path / "o" / "target.csv").n == 25
    assert main(["simulate", "--set", "p", "-o", str(tmp_path / "x")]) == EXIT_INPUT
    assert main(["simulate", "--set", "bogus=1", "-o", str(tmp_path / "x")]) == EXIT_INPUT


# --------------------------------------------------------------------- fit

def test_fit_defaults_schema_and_determinism(data, capsys):
    a = run_json(capsys, ["fit"] + study_args(data))
    validate(a, "fit")
    assert (a["t1"], a["t2"], a["rounds"]) == (5.0, 0.3, 1)
    assert len(a["beta_hat"]) == 20 and a["converged"]
    assert set(a["detected_set"]) == set(a["set_c1"]) & set(a["set_c2"])
    main(["fit"] + study_args(data))
    first = json.dumps(a, indent=2, sort_keys=True) + "\n"
    assert capsys.readouterr().out == first


def test_fit_target_only_equals_t1_zero(data, capsys):
    a = run_json(capsys, ["fit", "--target", str(data / "target.csv")])
    b = run_json(capsys, ["fit", "--t1", "0"] + study_args(data))
    assert a["beta_hat"] == b["beta_hat"] and b["detected_set"] == []


def test_fit_known_set(data, capsys):
    a = run_json(capsys, ["fit", "--known", "source1"] + study_args(data))
    assert a["detected_set"] == ["source1"]
    assert main(["fit", "--known", "nope"] + study_args(data)) == EXIT_INPUT


def test_fit_malformed_csv_exit_2(data, tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("y,x1,x2\n1.0,2.0,3.0\n1.0,oops,3.0\n")
    assert main(["fit", "--target", str(bad)]) == EXIT_INPUT
    err = capsys.readouterr().err
    assert "input error" in err and "row" in err.lower()
    assert main(["fit", "--target", str(tmp_path / "missing.csv")]) == EXIT_INPUT
    assert main(["fit", "--tau", "1.5", "--target", str(data / "target.csv")]) == EXIT_INPUT
    # duplicate study ids come from duplicate file names
    assert main(["fit", "--target", str(data / "target.csv"), "--source",
                 str(data / "target.csv")]) == EXIT_INPUT


def test_fit_nonconvergence_exit_3(data, tmp_path, monkeypatch, capsys):
    real = cli.fit_transfer

    def stalled(*a, **k):
        est = real(*a, **k)
        est.converged = False
        return est
    monkeypatch.setattr(cli, "fit_transfer", stalled)
    out = tmp_path / "fit.json"
    assert main(["fit", "-o", str(out)] + study_args(data)) == EXIT_NUMERIC
    assert json.loads(out.read_text())["converged"] is False
    assert "numerical failure" in capsys.readouterr().err


# ------------------------------------------------------------------ detect

def test_detect_schema_and_determinism(data, capsys):
    a = run_json(capsys, ["detect"] + study_args(data))
    validate(a, "detect")
    assert a["c1_bound"] == pytest.approx(5.0 * math.sqrt(math.log(20) / 60))
    assert set(a["contrast_l1"]) == {"source1", "source2"}
    for k, v in a["contrast_l1"].items():
        assert (k in a["set_c1"]) == (v <= a["c1_bound"])
    main(["detect"] + study_args(data))
    assert json.loads(capsys.readouterr().out) == a


# ------------------------------------------------------------------- infer

@pytest.fixture(scope="module")
def fit_json(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit") / "fit.json"
    assert main(["fit", "--known", "source1", "-o", str(out)] + study_args(data)) == EXIT_OK
    return out


def test_infer_qc_off_matches_debias(data, fit_json, capsys):
    a = run_json(capsys, ["infer", "--fit", str(fit_json), "--index", "2"] + study_args(data))
    validate(a, "infer")
    assert a["decision"] == "TransferDebias" and a["studies"] == ["target", "source1"]
    half = 1.959964 * math.sqrt(a["sigma_hat_sq"] / a["n_total"])
    assert a["ci"][1] - a["alpha_hat"] == pytest.approx(half, rel=1e-12)
    assert a["alpha_hat"] - a["ci"][0] == pytest.approx(half, rel=1e-12)
    # the same computation through the library
    d = json.loads(fit_json.read_text())
    t = read_study_csv(data / "target.csv", role=Role.TARGET)
    s1 = read_study_csv(data / "source1.csv")
    est = TransferEstimate(np.array(d["beta_hat"]), {k: np.array(v) for k, v in d["contrasts"].items()},
                           {"source1"}, {"source1"}, {"source1"})
    res = debias(t, [s1], est, 0.5, InferenceSettings(coefficient_index=2, seed=0))
    assert a["alpha_hat"] == res.alpha_hat and a["sigma_hat_sq"] == res.sigma_hat_sq
    main(["infer", "--fit", str(fit_json), "--index", "2"] + study_args(data))
    assert json.loads(capsys.readouterr().out) == a


def test_infer_index_out_of_range(data, fit_json, capsys):
    for idx in ("0", "21"):
        assert main(["infer", "--fit", str(fit_json), "--index", idx] + study_args(data)) == EXIT_INPUT
    assert main(["infer", "--fit", str(fit_json), "--target", str(data / "target.csv")]) == EXIT_INPUT


def test_infer_qc_forced_rejection(data, fit_json, monkeypatch, capsys):
    import transqr.qc as qc
    monkeypatch.setattr(qc, "shapiro_wilk", lambda x: (0.5, 0.0))
    a = run_json(capsys, ["infer", "--fit", str(fit_json), "--qc", "on", "--bootstrap-r", "20"]
                 + study_args(data))
    validate(a, "infer")
    assert a["decision"] == "TargetOnlyDebias" and a["sw_p_value"] == 0.0
    assert a["studies"] == ["target"]


def test_infer_qc_on_determinism(data, fit_json, capsys):
    argv = ["infer", "--fit", str(fit_json), "--qc", "on", "--bootstrap-r", "20"] + study_args(data)
    assert main(argv) == EXIT_OK
    first = capsys.readouterr().out
    validate(json.loads(first), "infer")
    assert main(argv) == EXIT_OK
    assert capsys.readouterr().out == first
    assert json.loads(first)["decision"] in ("TransferDebias", "TargetOnlyDebias")


# -------------------------------------------------------------- experiments

def tiny_recipe(**kw):
    d = {"name": "tiny", "seed": 5, "replications": 1, "methods": ["L1QR"],
         "scenario": {"p": 20, "s": 3, "n0": 40, "K": 2, "n_k": [40, 40], "H_size": 12, "h1": 1.0,
                      "informative_ids": [1], "residual_laws": {1: "Normal", 2: "Noisy"}}}
    d.update(kw)
    return d


def test_one_replication_one_method_one_record(tmp_path):
    r = recipe_from_dict(tiny_recipe())
    recs = run_experiment(r, workers=1)
    assert len(recs) == 1 and recs[0]["status"] == "ok" and recs[0]["method"] == "L1QR"
    agg = write_outputs(r, recs, tmp_path)
    validate(agg, "aggregate")
    rows = list(csv.DictReader(io.StringIO((tmp_path / "tiny_records.csv").read_text())))
    assert len(rows) == 1 and rows[0]["seconds"] == ""


def test_record_count_is_methods_times_replications():
    r = recipe_from_dict(tiny_recipe(replications=2, methods=["L1QR", "TransQR", "NaivePooling"],
                                     grid=[{"label": "a"}, {"label": "b", "n0": 50}]))
    recs = run_experiment(r, workers=1)
    assert len(recs) == 3 * 2 * 2
    assert {(x["cell"], x["method"], x["replication"]) for x in recs} == {
        (c, m, i) for c in "ab" for m in ("L1QR", "TransQR", "NaivePooling") for i in (0, 1)}
    # the same replication shares its seed across methods (paired design)
    seeds = {(x["cell"], x["replication"]): x["seed"] for x in recs}
    assert all(x["seed"] == seeds[(x["cell"], x["replication"])] for x in recs)


def test_recipe_validation():
    with pytest.raises(RecipeError):
        recipe_from_dict({"name": "x"})
    with pytest.raises(RecipeError):
        recipe_from_dict(tiny_recipe(bogus=1))
    with pytest.raises(RecipeError):
        recipe_from_dict(tiny_recipe(methods=[]))
    with pytest.raises(RecipeError):
        recipe_from_dict(tiny_recipe(replications=0))
    with pytest.raises(ValueError):
        recipe_from_dict(tiny_recipe(methods=["Nope"]))
    with pytest.raises(RecipeError, match="cell"):
        recipe_from_dict(tiny_recipe(grid=[{"label": "bad", "p": 2}]))
    with pytest.raises(ExternalMethodError, match="register"):
        recipe_from_dict(tiny_recipe(methods=["TransQR_2step"]))
    with pytest.raises(ValueError):
        ex.register_external("L1QR", lambda *a: None)


def test_bundled_recipes_load():
    names = bundled_recipes()
    assert {"motivating", "fig2", "fig3", "table1", "table2"} <= set(names)
    for n in names:
        r = load_recipe(n)
        assert isinstance(r, ExperimentRecipe) and r.replications >= 1
        for label, over in r.cells():
            r.cell_config(over)
    m = load_recipe("motivating")
    assert set(m.methods) == {Method.L1QR, Method.NAIVE_POOLING, Method.TRANSQR}
    assert len(m.cells()) == 12
    with pytest.raises(RecipeError):
        load_recipe("no_such_recipe")


def test_experiment_cli_determinism_and_parallel(tmp_path, capsys):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(tiny_recipe(replications=2, methods=["L1QR", "TransQR"])))
    outs = []
    for i, threads in enumerate(("1", "1", "2")):
        o = tmp_path / f"out{i}"
        assert main(["experiment", str(path), "--threads", threads, "-o", str(o)]) == EXIT_OK
        outs.append(o)
    for name in ("tiny_records.csv", "tiny_aggregate.json"):
        blobs = {(o / name).read_bytes() for o in outs}
        assert len(blobs) == 1
    agg = json.loads((outs[0] / "tiny_aggregate.json").read_text())
    validate(agg, "aggregate")
    assert agg["success_fraction"] == 1.0
    assert {g["method"] for g in agg["groups"]} == {"L1QR", "TransQR"}


def test_experiment_cli_overrides_and_list(tmp_path, capsys):
    assert main(["experiment", "--list"]) == EXIT_OK
    assert "motivating" in capsys.readouterr().out.split()
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(tiny_recipe()))
    assert main(["experiment", str(path), "--set", "n0=30", "--replications", "2", "--seed", "9",
                 "--timing", "-o", str(tmp_path / "o")]) == EXIT_OK
    rows = list(csv.DictReader(io.StringIO((tmp_path / "o" / "tiny_records.csv").read_text())))
    assert len(rows) == 2 and all(r["seconds"] != "" for r in rows)
    assert main(["experiment", str(path), "--cells", "zzz", "-o", str(tmp_path / "o")]) == EXIT_INPUT
    assert main(["experiment"]) == EXIT_INPUT
    assert main(["experiment", "no_such_recipe"]) == EXIT_INPUT


def test_experiment_partial_failure_exit_4(tmp_path, monkeypatch, capsys):
    def broken(sc, tau, seed):
        raise RuntimeError("external baseline failed")
    monkeypatch.setitem(ex._external_impls, Method.TRANSQR_2STEP, broken)
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(tiny_recipe(methods=["L1QR", "TransQR_2step"])))
    out = tmp_path / "o"
    assert main(["experiment", str(path), "--threads", "1", "-o", str(out)]) == EXIT_PARTIAL
    rows = list(csv.DictReader(io.StringIO((out / "tiny_records.csv").read_text())))
    assert [r["status"] for r in rows] == ["ok", "failed"]
    assert "external baseline failed" in rows[1]["error"]
    agg = json.loads((out / "tiny_aggregate.json").read_text())
    assert agg["success_fraction"] == 0.5


def test_registered_external_method_runs(monkeypatch):
    monkeypatch.setitem(ex._external_impls, Method.TRANSSQR_2STEP,
                        lambda sc, tau, seed: np.zeros(sc.config.p))
    recs = run_experiment(recipe_from_dict(tiny_recipe(methods=["TransSQR_2step"])), workers=1)
    assert recs[0]["status"] == "ok" and recs[0]["l1_error"] > 0


def test_unregistered_external_in_cli_exit_2(tmp_path, capsys):
    path = tmp_path / "ext.yaml"
    path.write_text(yaml.safe_dump(tiny_recipe(methods=["TransQR_2step"])))
    assert main(["experiment", str(path), "-o", str(tmp_path / "o")]) == EXIT_INPUT
    assert "register" in capsys.readouterr().err


def test_simulate_unrealizable_gap_is_input_error(tmp_path, capsys):
    argv = ["simulate", "-o", str(tmp_path), "--set", "p=20", "--set", "s=3", "--set", "K=1",
            "--set", "informative_ids=[]", "--set", "H_size=5", "--set", "h1=1.0"]
    assert main(argv) == EXIT_INPUT


def test_pooling_uses_every_source():
    from transqr.simgen import generate_scenario
    from transqr.transfer import OracleSetSpec, TuningSpec, fit_with_known_set
    r = recipe_from_dict(tiny_recipe(methods=["L1QR", "Pooling"]))
    recs = run_experiment(r, workers=1)
    assert recs[0]["l2_error"] != recs[1]["l2_error"]
    ctx = ex._Context(r, generate_scenario(r.scenario), 0)
    est = ctx.known(s.id for s in ctx.sc.sources)
    assert est.detected_set == {"source1", "source2"}
