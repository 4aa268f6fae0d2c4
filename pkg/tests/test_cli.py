import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from cu_eval import simulation as sim
from cu_eval.cli import main
from cu_eval.data import Dataset, write_csv
from cu_eval.regimes import save_regime

from conftest import make_crp


@pytest.fixture(scope="module")
def s1_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("s1")
    assert main(["sample", "--setting", "S1", "--n", "2000", "--seed", "3",
                 "--out", str(d / "s1.csv")]) == 0
    save_regime(sim.F_OPT, d / "f_opt.json")
    save_regime(sim.STATIC_2, d / "static2.json")
    return d


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def estimate_s1(d, out, *extra):
    return main(["estimate", "--data", str(d / "s1.csv"), "--schema", str(d / "schema.json"),
                 "--regime", str(d / "f_opt.json"), "--regime", str(d / "static2.json"),
                 "--estimators", "gc_nb,ipw_nb", "--ci", "bootstrap", "--boot", "60",
                 "--seed", "1", "--out", str(out), *extra])


def test_simulate_smoke(tmp_path, capsys):
    rc = main(["simulate", "--setting", "S1", "--n", "500", "--iters", "4", "--boot", "10",
               "--seed", "7", "--out", str(tmp_path)])
    assert rc == 0
    rows = read_rows(tmp_path / "report.csv")
    assert [r["estimator"] for r in rows] == ["ipw_b", "ipw_nb", "gc_b", "gc_nb"]
    assert {"B_x100", "SE_x10", "Co", "mc_se_bias", "n_failed"} <= set(rows[0])
    meta = json.loads((tmp_path / "metadata.json").read_text())
    assert meta["seed"] == 7 and meta["truth"]["utility"] == "-2/15"
    assert "Bx10^2" in capsys.readouterr().out


def test_simulate_from_config(tmp_path):
    cfg = {"setting": "S3", "n": 300, "n_iter": 3, "n_boot": 5, "estimators": ["gc_nb"],
           "ci": ["sandwich"], "seed": 2, "output": "res"}
    (tmp_path / "sim.json").write_text(json.dumps(cfg))
    assert main(["simulate", "--config", str(tmp_path / "sim.json"), "--iters", "2"]) == 0
    meta = json.loads((tmp_path / "res" / "metadata.json").read_text())
    assert meta["n_iter"] == 2 and meta["ci_methods"] == ["sandwich-wald"]


def test_unknown_setting_exit_code(tmp_path, capsys):
    assert main(["simulate", "--setting", "S9", "--out", str(tmp_path)]) == 2
    assert "valid settings: S1, S2, S3, S2M" in capsys.readouterr().err


def test_console_script_exit_code(tmp_path):
    r = subprocess.run([sys.executable, "-m", "cu_eval.cli", "simulate", "--setting", "S9",
                        "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 2 and "S2M" in r.stderr


def test_estimate_s1(s1_files, tmp_path, capsys):
    assert estimate_s1(s1_files, tmp_path) == 0
    rows = read_rows(tmp_path / "estimates.csv")
    comps = {(r["estimator"], r["comparator"]) for r in rows}
    assert comps == {(e, c) for e in ("gc_nb", "ipw_nb")
                     for c in ("f_opt vs SOC", "static-2 vs SOC", "f_opt vs static-2")}
    for r in rows:
        if r["comparator"] == "f_opt vs SOC":
            assert abs(float(r["estimate"]) + 2 / 15) < 0.05
            assert float(r["lower"]) <= float(r["estimate"]) <= float(r["upper"])
    svg = (tmp_path / "forest.svg").read_text()
    assert svg.count("<rect x=") == len(rows)
    for f in ("metadata.json", "estimates.json", "diagnostics.csv"):
        assert (tmp_path / f).exists()


def test_estimate_is_deterministic_and_plot_reproducible(s1_files, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert estimate_s1(s1_files, a) == 0 and estimate_s1(s1_files, b) == 0
    for f in ("estimates.csv", "estimates.json", "forest.svg", "diagnostics.csv"):
        assert (a / f).read_bytes() == (b / f).read_bytes()
    first = (a / "forest.svg").read_bytes()
    (a / "forest.svg").unlink()
    assert main(["plot", str(a / "estimates.csv")]) == 0
    assert (a / "forest.svg").read_bytes() == first


def test_report_improvement(s1_files, tmp_path, capsys):
    plain, flipped = tmp_path / "p", tmp_path / "f"
    estimate_s1(s1_files, plain)
    out_plain = capsys.readouterr().out
    estimate_s1(s1_files, flipped, "--report-improvement")
    out_flip = capsys.readouterr().out
    assert (plain / "estimates.csv").read_bytes() == (flipped / "estimates.csv").read_bytes()
    est = float(read_rows(plain / "estimates.csv")[0]["estimate"])
    assert f"{est:.4f}" in out_plain and f"{-est:.4f}" in out_flip
    assert "improvement" in (flipped / "forest.svg").read_text()
    main(["plot", str(plain / "estimates.csv"), "--out", str(tmp_path / "x.svg"),
          "--report-improvement"])
    assert (tmp_path / "x.svg").read_bytes() == (flipped / "forest.svg").read_bytes()


def test_estimate_crp_with_guideline(tmp_path, capsys):
    crp, female, t, y = make_crp(600, 2)
    labels = np.array(["csDMARD", "biologics"])[t]
    with open(tmp_path / "crp.csv", "w") as fh:
        fh.write("y,t,crp,female\n")
        for row in zip(y, labels, crp, female.astype(int)):
            fh.write(",".join(str(v) for v in row) + "\n")
    (tmp_path / "guideline.rules").write_text("# CRP threshold\nIF crp < 10 THEN csDMARD\n"
                                              "ELSE biologics\n")
    cfg = {
        "data": "crp.csv",
        "schema": {"columns": {"y": {"type": "numeric"},
                               "t": {"type": "categorical", "levels": ["csDMARD", "biologics"]},
                               "crp": {"type": "numeric"},
                               "female": {"type": "binary"}},
                   "outcome": "y", "treatment": "t"},
        "regimes": [{"file": "guideline.rules", "id": "f_cgl"},
                    {"dsl": "IF crp < 20 THEN csDMARD\nELSE biologics", "id": "loose"}],
        "models": {"pi_nb": "1 + N(crp) + N(female)", "pi_b": "1 + N(crp) + N(female)",
                   "h_b": "1 + N(crp) + N(female) + CONC + CONC:N(crp)",
                   "h_nb": "T + T:N(crp) + N(female)"},
        "ci": ["bootstrap", "sandwich"], "n_boot": 50, "seed": 4, "output": "out",
    }
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert main(["estimate", "--config", str(tmp_path / "cfg.json")]) == 0
    rows = read_rows(tmp_path / "out" / "estimates.csv")
    assert {r["ci_method"] for r in rows} == {"bootstrap-percentile", "sandwich-wald"}
    assert len(rows) == 4 * 3 * 2
    meta = json.loads((tmp_path / "out" / "metadata.json").read_text())
    assert "csDMARD" in meta["regimes"][0]["source"] and "biologics" in meta["regimes"][0]["source"]


def test_positivity_failure_writes_diagnostics(s1_files, tmp_path, capsys):
    cfg = {"data": str(s1_files / "s1.csv"), "schema": str(s1_files / "schema.json"),
           "regimes": [str(s1_files / "f_opt.json")], "estimators": ["ipw_nb"],
           "floor": 0.5, "n_boot": 10, "output": str(tmp_path)}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert main(["estimate", "--config", str(tmp_path / "cfg.json")]) == 1
    assert "positivity violation at row" in capsys.readouterr().err
    diag = read_rows(tmp_path / "diagnostics.csv")
    assert diag and all(r["status"] == "positivity" for r in diag)
    assert all(float(r["propensity"]) < 0.5 and int(r["row"]) >= 1 for r in diag)
    assert not (tmp_path / "estimates.csv").exists()


def test_weight_cap_allows_run(s1_files, tmp_path):
    cfg = {"data": str(s1_files / "s1.csv"), "schema": str(s1_files / "schema.json"),
           "regimes": [str(s1_files / "f_opt.json")], "estimators": ["ipw_nb"],
           "floor": 0.5, "ci": [], "output": str(tmp_path)}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert main(["estimate", "--config", str(tmp_path / "cfg.json"), "--weight-cap", "3"]) == 0
    diag = read_rows(tmp_path / "diagnostics.csv")
    assert int(diag[0]["n_capped"]) > 0


@pytest.mark.parametrize("argv,msg", [
    (["estimate", "--data", "nope.csv", "--schema", "nope.json"], "schema file not found"),
    (["estimate", "--config", "missing.json"], "not found"),
    (["plot", "missing.csv"], "estimates file not found"),
    (["oracle", "--setting", "S7"], "valid settings"),
])
def test_config_errors(argv, msg, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2
    assert msg in capsys.readouterr().err


def test_bad_schema_shape(tmp_path, capsys):
    (tmp_path / "s.json").write_text(json.dumps({"columns": [], "outcome": "y",
                                                 "treatment": "t"}))
    assert main(["estimate", "--data", "d.csv", "--schema", str(tmp_path / "s.json")]) == 2
    assert "columns" in capsys.readouterr().err


def test_duplicate_regime_ids(s1_files, tmp_path, capsys):
    rc = main(["estimate", "--data", str(s1_files / "s1.csv"),
               "--schema", str(s1_files / "schema.json"),
               "--regime", str(s1_files / "f_opt.json"), "--regime", str(s1_files / "f_opt.json"),
               "--out", str(tmp_path)])
    assert rc == 2 and "unique" in capsys.readouterr().err


def test_learn_regime(tmp_path, capsys):
    main(["sample", "--setting", "S1", "--n", "5000", "--seed", "3",
          "--out", str(tmp_path / "d.csv")])
    save_regime(sim.F_OPT, tmp_path / "f_opt.json")
    args = ["learn-regime", "--data", str(tmp_path / "d.csv"),
            "--schema", str(tmp_path / "schema.json"), "--seed", "3",
            "--reference", str(tmp_path / "f_opt.json")]
    assert main(args + ["--out", str(tmp_path / "a.json")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    diag = json.loads((tmp_path / "a_diagnostics.json").read_text())
    assert diag["agreement"]["cells"] == 12 and diag["agreement"]["agree"] >= 11
    assert set(diag["holdout_rmse"]) == {"1", "2", "3"}
    assert diag["n_train"] == 2500


def test_learn_regime_needs_holdout(tmp_path, capsys):
    rc = main(["learn-regime", "--data", "x.csv", "--schema", "s.json",
               "--train-fraction", "1.0"])
    assert rc == 2 and "holdout required" in capsys.readouterr().err


def test_learn_regime_small_arm(tmp_path, capsys):
    main(["sample", "--setting", "S1", "--n", "100", "--seed", "0",
          "--out", str(tmp_path / "d.csv")])
    rc = main(["learn-regime", "--data", str(tmp_path / "d.csv"),
               "--schema", str(tmp_path / "schema.json"), "--out", str(tmp_path / "r.json")])
    assert rc == 1 and "D/10" in capsys.readouterr().err


def test_oracle_command(capsys):
    assert main(["oracle", "--exhaustive", "--json"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["S1"]["E[Y(f)]"] == "7/30" and out["S2"]["utility"] == "0"
    assert out["exhaustive"]["f_opt_is_optimal"] and out["exhaustive"]["regimes"] == 531441


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("CU_EVAL_SEED", "11")
    main(["sample", "--setting", "S2", "--n", "50", "--out", str(tmp_path / "a.csv")])
    main(["sample", "--setting", "S2", "--n", "50", "--seed", "11", "--out", str(tmp_path / "b.csv")])
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
