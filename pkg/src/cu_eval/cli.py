"""Command-line front end.

Exit codes: 0 success, 1 estimation failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import platform
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import scipy

from . import __version__
from .analysis import AnalysisError, analyze
from .data import (BINARY, CATEGORICAL, CellIndex, Dataset, IngestionError, Schema,
                   SchemaError, ingest_csv, write_csv)
from .design import DesignError, DesignSpec, saturated
from .estimators import ESTIMATORS, EstimationError
from .glm import LINEAR, LOGISTIC, GLMError
from .inference import BootstrapError, ci_method
from .pipeline import ModelBundle, ModelSpec
from .regimes import (RegimeError, guideline_crp, learn_rff_regime, load_regime,
                      parse_rule_dsl, regime_from_dict, save_regime)
from .report import (estimate_rows, format_table, write_diagnostics_csv, write_estimates_csv,
                     write_forest, write_json, write_report_csv)
from . import simulation as sim

EXIT_OK, EXIT_ESTIMATION, EXIT_CONFIG = 0, 1, 2
SEED_ENV = "CU_EVAL_SEED"


class ConfigError(ValueError):
    pass


# -- helpers ------------------------------------------------------------------------

def _load_config(path: str | None) -> tuple[dict, Path]:
    if not path:
        return {}, Path.cwd()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{p}: config must be a JSON object")
    return cfg, p.parent


def _pick(flag: Any, cfg: dict, *keys: str, default: Any = None) -> Any:
    if flag is not None:
        return flag
    for k in keys:
        if k in cfg:
            return cfg[k]
    return default


def _resolve(base: Path, p: str | os.PathLike) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def _seed(flag: int | None, cfg: dict) -> int:
    v = _pick(flag, cfg, "seed")
    if v is None:
        env = os.environ.get(SEED_ENV)
        if env is not None:
            try:
                v = int(env)
            except ValueError:
                raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return int(v) if v is not None else 0


def _split_list(v: Any) -> list[str]:
    if v is None:
        return []
    if isinstance(v, str):
        return [x.strip() for x in v.split(",") if x.strip()]
    return [str(x) for x in v]


def _estimators(v: Any) -> tuple[str, ...]:
    ests = tuple(_split_list(v)) or ESTIMATORS
    bad = [e for e in ests if e not in ESTIMATORS]
    if bad:
        raise ConfigError(f"unknown estimator(s) {bad}; valid: {', '.join(ESTIMATORS)}")
    return ests


def _ci_methods(v: Any, default=("bootstrap",)) -> tuple[str, ...]:
    names = _split_list(v) if v is not None else list(default)
    try:
        return tuple(ci_method(m) for m in names if m != "none")
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _versions() -> dict:
    return {"cu_eval": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _load_schema(spec: Any, base: Path) -> Schema:
    if spec is None:
        raise ConfigError("a schema is required (--schema or config 'schema')")
    if isinstance(spec, dict):
        return Schema.from_dict(spec)
    p = _resolve(base, spec)
    if not p.exists():
        raise ConfigError(f"schema file not found: {p}")
    return Schema.load(p)


def _load_data(data: Any, schema: Schema, base: Path) -> Dataset:
    if data is None:
        raise ConfigError("a dataset is required (--data or config 'data')")
    p = _resolve(base, data)
    if not p.exists():
        raise ConfigError(f"data file not found: {p}")
    return ingest_csv(p, schema)


def _regime(entry: Any, base: Path):
    if isinstance(entry, str):
        entry = {"file": entry}
    if not isinstance(entry, dict):
        raise ConfigError(f"regime entry must be an object or a file path, got {entry!r}")
    rid = entry.get("id")
    if "file" in entry:
        p = _resolve(base, entry["file"])
        if not p.exists():
            raise ConfigError(f"regime file not found: {p}")
        r = load_regime(p)
    elif "dsl" in entry:
        r = parse_rule_dsl(entry["dsl"], rid or "rules")
    elif entry.get("preset") == "f_cgl":
        r = guideline_crp(entry.get("column", "crp"), float(entry.get("threshold", 10.0)),
                          entry.get("low", "csDMARD"), entry.get("high", "biologics"))
    elif "kind" in entry:
        r = regime_from_dict(entry)
    else:
        raise ConfigError(f"cannot build a regime from {entry!r}")
    if rid:
        r.id = rid
    return r


def _family_for(schema: Schema) -> str:
    return LOGISTIC if schema.binary_outcome else LINEAR


def _bundle(models: Any, schema: Schema) -> ModelBundle:
    if models is None or models == "saturated":
        cats = [c.name for c in schema.covariates if c.kind in (CATEGORICAL, BINARY)]
        if len(cats) != len(schema.covariates) or not cats:
            raise ConfigError("the 'saturated' model preset needs categorical covariates only; "
                              "give explicit formulas for numeric columns")
        cells = ":".join(f"C({c})" for c in cats)
        return ModelBundle(saturated(cats), saturated(cats),
                           ModelSpec(saturated(cats, concordance=True), _family_for(schema)),
                           ModelSpec(DesignSpec.parse(f"{cells}:T"), LINEAR), "saturated")
    if isinstance(models, str):
        try:
            return sim.PRESETS[models]
        except KeyError:
            raise ConfigError(f"unknown model preset {models!r}; valid: saturated, "
                              f"{', '.join(sim.PRESETS)}") from None
    if not isinstance(models, dict):
        raise ConfigError("'models' must be a preset name or an object of formulas")
    coding = models.get("coding", "full")

    def spec(key, family):
        v = models.get(key)
        if v is None:
            raise ConfigError(f"models.{key} is required")
        if isinstance(v, str):
            return DesignSpec.parse(v, coding), family
        return DesignSpec.parse(v["formula"], v.get("coding", coding)), v.get("family", family)

    pi_nb, _ = spec("pi_nb", None)
    pi_b, _ = spec("pi_b", None)
    hb, fb = spec("h_b", _family_for(schema))
    hnb, fnb = spec("h_nb", LINEAR)
    return ModelBundle(pi_nb, pi_b, ModelSpec(hb, fb), ModelSpec(hnb, fnb), "custom")


# -- simulate -------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg, base = _load_config(args.config)
    setting = _pick(args.setting, cfg, "setting")
    if setting not in sim.SETTINGS:
        raise ConfigError(f"unknown setting {setting!r}; valid settings: {', '.join(sim.SETTINGS)}")
    n = int(_pick(args.n, cfg, "n", default=2000))
    iters = int(_pick(args.iters, cfg, "n_iter", "iters", default=100))
    boot = int(_pick(args.boot, cfg, "n_boot", "boot", default=500))
    if n < 2 or iters < 2 or boot < 1:
        raise ConfigError("need n >= 2, iters >= 2 and boot >= 1")
    ests = _estimators(_pick(args.estimators, cfg, "estimators"))
    methods = _ci_methods(_pick(args.ci, cfg, "ci_methods", "ci"))
    level = float(_pick(args.level, cfg, "level", default=0.95))
    seed = _seed(args.seed, cfg)
    workers = int(_pick(args.workers, cfg, "workers", default=1))
    out = _resolve(base, _pick(args.out, cfg, "output", default="."))
    out.mkdir(parents=True, exist_ok=True)
    rep = sim.run_monte_carlo(setting, n, iters, boot, ests, methods, seed, workers, level)
    rows = rep.rows()
    write_report_csv(rows, out / "report.csv")
    s = sim.SETTINGS[setting]
    write_json({"command": "simulate", "setting": setting, "n": n, "n_iter": iters,
                "n_boot": boot, "estimators": list(ests), "ci_methods": list(methods),
                "level": level, "seed": seed, "workers": workers,
                "truth": s.truth.to_dict(), "models": s.models.to_dict(),
                "allocation": s.allocation.name, "regime": s.regime.to_dict(),
                "versions": _versions()}, out / "metadata.json")
    print(f"setting {setting}  n={n}  iters={iters}  boot={boot}  truth={float(s.truth.utility):.5f}")
    print(f"{'estimator':<10}{'ci':<22}{'Bx10^2':>9}{'SEx10':>8}{'Co':>7}{'failed':>8}")
    for r in rows:
        print(f"{r['estimator']:<10}{(r.get('ci_method') or '-'):<22}{r['B_x100']:>9.2f}"
              f"{r['SE_x10']:>8.3f}{r['Co']:>7.2f}{r['n_failed']:>8d}")
    print(f"wrote {out / 'report.csv'}")
    return EXIT_OK


# -- estimate -------------------------------------------------------------------------

def cmd_estimate(args) -> int:
    cfg, base = _load_config(args.config)
    schema = _load_schema(_pick(args.schema, cfg, "schema"), base)
    ds = _load_data(_pick(args.data, cfg, "data"), schema, base)
    entries = list(cfg.get("regimes", [])) + [{"file": f} for f in (args.regime or [])]
    if not entries:
        raise ConfigError("at least one regime is required (config 'regimes' or --regime)")
    regimes = [_regime(e, base) for e in entries]
    ids = [r.id for r in regimes]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"regime ids must be unique, got {ids}")
    bundle = _bundle(_pick(args.models, cfg, "models"), schema)
    ests = _estimators(_pick(args.estimators, cfg, "estimators"))
    methods = _ci_methods(_pick(args.ci, cfg, "ci_methods", "ci"))
    level = float(_pick(args.level, cfg, "level", default=0.95))
    boot = int(_pick(args.boot, cfg, "n_boot", "boot", default=500))
    seed = _seed(args.seed, cfg)
    workers = int(_pick(args.workers, cfg, "workers", default=1))
    cap = _pick(args.weight_cap, cfg, "weight_cap")
    floor = float(cfg.get("floor", 1e-6))
    improvement = bool(args.report_improvement or cfg.get("report_improvement", False))
    out = _resolve(base, _pick(args.out, cfg, "output", default="."))
    out.mkdir(parents=True, exist_ok=True)
    meta = {"command": "estimate", "n": ds.n, "regimes": [r.to_dict() for r in regimes],
            "models": bundle.to_dict(), "estimators": list(ests), "ci_methods": list(methods),
            "level": level, "n_boot": boot, "seed": seed, "weight_cap": cap, "floor": floor,
            "versions": _versions()}
    write_json(meta, out / "metadata.json")
    try:
        res = analyze(ds, bundle, regimes, ests, methods, level, boot, seed, workers, floor,
                      None if cap is None else float(cap),
                      bool(cfg.get("compare_regimes", True)))
    except AnalysisError as e:
        write_diagnostics_csv(e.diagnostics, out / "diagnostics.csv")
        print(f"error: {e}", file=sys.stderr)
        print(f"per-row diagnostics written to {out / 'diagnostics.csv'}", file=sys.stderr)
        return EXIT_ESTIMATION
    rows = estimate_rows(res.utilities)
    write_estimates_csv(rows, out / "estimates.csv")
    write_json({"utilities": [u.to_dict() for u in res.utilities], "values": res.values},
               out / "estimates.json")
    write_diagnostics_csv(res.diagnostics, out / "diagnostics.csv")
    write_forest(out / "estimates.csv", out / "forest.svg", improvement)
    if improvement:
        print("(differences shown as improvements: sign negated for display)")
    print(format_table(rows, -1.0 if improvement else 1.0))
    return EXIT_OK


# -- plot --------------------------------------------------------------------------------

def cmd_plot(args) -> int:
    src = Path(args.estimates)
    if not src.exists():
        raise ConfigError(f"estimates file not found: {src}")
    write_forest(src, args.out or src.with_name("forest.svg"), args.report_improvement)
    return EXIT_OK


# -- learn-regime ------------------------------------------------------------------------

def _cell_agreement(learned, reference, ds: Dataset) -> dict:
    covs = ds.schema.covariates
    if covs and all(c.kind in (CATEGORICAL, BINARY) for c in covs):
        index = CellIndex.for_schema(ds.schema)
        cells = [index.codes_of(c) for c in range(index.n_cells)]
        grid = Dataset(ds.schema, np.zeros(len(cells)), np.zeros(len(cells), dtype=int),
                       {c.name: [cell[j] for cell in cells] for j, c in enumerate(covs)})
    else:
        grid = ds
    a, b = learned.assign(grid), reference.assign(grid)
    return {"reference": reference.id, "cells": int(grid.n), "agree": int(np.sum(a == b)),
            "agreement": float(np.mean(a == b))}


def cmd_learn_regime(args) -> int:
    cfg, base = _load_config(args.config)
    frac = float(_pick(args.train_fraction, cfg, "train_fraction", default=0.5))
    if not 0.0 < frac < 1.0:
        raise ConfigError(f"holdout required: train fraction must lie in (0, 1), got {frac:g}")
    schema = _load_schema(_pick(args.schema, cfg, "schema"), base)
    ds = _load_data(_pick(args.data, cfg, "data"), schema, base)
    seed = _seed(args.seed, cfg)
    D = int(_pick(args.features, cfg, "D", default=200))
    sigma = _pick(args.sigma, cfg, "sigma")
    lam = float(_pick(args.lam, cfg, "lambda", default=1.0))
    minimize = not bool(args.maximize or cfg.get("maximize", False))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(ds.n)
    n_train = int(round(frac * ds.n))
    if n_train < 2 or n_train >= ds.n:
        raise ConfigError("holdout required: split leaves an empty training or holdout set")
    train, hold = ds.take(np.sort(perm[:n_train])), ds.take(np.sort(perm[n_train:]))
    try:
        regime = learn_rff_regime(train, D, None if sigma is None else float(sigma), lam, seed,
                                  minimize, id=_pick(args.id, cfg, "id", default="f_rff"))
    except RegimeError as e:
        print(f"estimation failed: {e}", file=sys.stderr)
        return EXIT_ESTIMATION
    regime.scorer.meta["train_fraction"] = frac
    out = _resolve(base, _pick(args.out, cfg, "output", default="regime.json"))
    out.parent.mkdir(parents=True, exist_ok=True)
    save_regime(regime, out)
    pred = regime.scorer.predict(hold)
    rmse = {}
    for a, lvl in enumerate(schema.treatment_levels):
        rows = hold.t == a
        rmse[str(lvl)] = (float(np.sqrt(np.mean((pred[rows, a] - hold.y[rows]) ** 2)))
                          if rows.any() else math.nan)
    diag: dict[str, Any] = {"n_train": int(train.n), "n_holdout": int(hold.n),
                            "holdout_rmse": rmse, "seed": seed, "D": D, "lambda": lam,
                            "sigma": regime.scorer.sigma}
    ref = _pick(args.reference, cfg, "reference")
    if ref:
        diag["agreement"] = _cell_agreement(regime, _regime(ref, base), ds)
    diag_path = out.with_name(out.stem + "_diagnostics.json")
    write_json(diag, diag_path)
    print(f"wrote {out}")
    for lvl, v in rmse.items():
        print(f"holdout RMSE arm {lvl}: {v:.4f}")
    if "agreement" in diag:
        a = diag["agreement"]
        print(f"agreement with {a['reference']}: {a['agree']}/{a['cells']} cells "
              f"({a['agreement']:.0%})")
    return EXIT_OK


# -- oracle / sample -----------------------------------------------------------------

def cmd_oracle(args) -> int:
    ids = [args.setting] if args.setting else list(sim.SETTINGS)
    for sid in ids:
        if sid not in sim.SETTINGS:
            raise ConfigError(f"unknown setting {sid!r}; valid settings: {', '.join(sim.SETTINGS)}")
    out = {sid: sim.SETTINGS[sid].truth.to_dict() for sid in ids}
    if args.exhaustive:
        vals, denom = sim.all_cell_regime_values()
        arms = sim.regime_cell_arms(sim.F_OPT)
        f_opt = sum((a - 1) * 3 ** c for c, a in enumerate(arms))
        out["exhaustive"] = {"regimes": int(vals.size), "min_value": f"{int(vals.min())}/{denom}",
                             "f_opt_value": f"{int(vals[f_opt])}/{denom}",
                             "f_opt_is_optimal": bool(vals[f_opt] == vals.min())}
    if args.json:
        print(json.dumps(out, indent=2, sort_keys=True))
        return EXIT_OK
    for sid in ids:
        t = out[sid]
        print(f"{sid:<4} E[Y]={t['E[Y]']:<6} ({t['E[Y]_float']:.5f})  "
              f"E[Y(f)]={t['E[Y(f)]']:<6} ({t['E[Y(f)]_float']:.5f})  "
              f"utility={t['utility']} ({t['utility_float']:.5f})")
    if args.exhaustive:
        e = out["exhaustive"]
        print(f"f_opt optimal over {e['regimes']} cell regimes: {e['f_opt_is_optimal']} "
              f"(value {e['f_opt_value']})")
    return EXIT_OK


def cmd_sample(args) -> int:
    if args.setting not in sim.SETTINGS:
        raise ConfigError(f"unknown setting {args.setting!r}; valid settings: "
                          f"{', '.join(sim.SETTINGS)}")
    ds = sim.sample_population(args.setting, args.n, _seed(args.seed, {}))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(ds, out)
    schema_path = Path(args.schema) if args.schema else out.with_name("schema.json")
    write_json(ds.schema.to_dict(), schema_path)
    print(f"wrote {out} and {schema_path}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cu-eval", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="Monte Carlo study for one setting")
    s.add_argument("--config")
    s.add_argument("--setting")
    s.add_argument("--n", type=int)
    s.add_argument("--iters", type=int)
    s.add_argument("--boot", type=int)
    s.add_argument("--estimators", help="comma-separated subset of " + ",".join(ESTIMATORS))
    s.add_argument("--ci", help="bootstrap, sandwich, both comma-separated, or none")
    s.add_argument("--level", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--out", help="output directory")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("estimate", help="clinical utilities on a CSV dataset")
    e.add_argument("--config")
    e.add_argument("--data")
    e.add_argument("--schema")
    e.add_argument("--regime", action="append", help="regime file (rule DSL or JSON); repeatable")
    e.add_argument("--models", help="model preset: saturated, correct or misspecified")
    e.add_argument("--estimators")
    e.add_argument("--ci")
    e.add_argument("--level", type=float)
    e.add_argument("--boot", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--workers", type=int)
    e.add_argument("--weight-cap", type=float, dest="weight_cap")
    e.add_argument("--report-improvement", action="store_true", dest="report_improvement",
                   help="negate displayed differences (files keep the raw sign)")
    e.add_argument("--out", help="output directory")
    e.set_defaults(func=cmd_estimate)

    pl = sub.add_parser("plot", help="re-render forest.svg from estimates.csv")
    pl.add_argument("estimates")
    pl.add_argument("--out")
    pl.add_argument("--report-improvement", action="store_true", dest="report_improvement")
    pl.set_defaults(func=cmd_plot)

    lr = sub.add_parser("learn-regime", help="learn an RFF regime on a training split")
    lr.add_argument("--config")
    lr.add_argument("--data")
    lr.add_argument("--schema")
    lr.add_argument("--train-fraction", type=float, dest="train_fraction")
    lr.add_argument("--features", type=int, help="number of random features D")
    lr.add_argument("--sigma", type=float)
    lr.add_argument("--lam", type=float)
    lr.add_argument("--seed", type=int)
    lr.add_argument("--maximize", action="store_true", help="larger outcome is better")
    lr.add_argument("--reference", help="regime file to compare against")
    lr.add_argument("--id")
    lr.add_argument("--out", help="output regime JSON")
    lr.set_defaults(func=cmd_learn_regime)

    o = sub.add_parser("oracle", help="print exact enumeration truths")
    o.add_argument("--setting")
    o.add_argument("--exhaustive", action="store_true", help="check f_opt against all 3^12 regimes")
    o.add_argument("--json", action="store_true")
    o.set_defaults(func=cmd_oracle)

    sm = sub.add_parser("sample", help="write a simulated dataset and its schema")
    sm.add_argument("--setting", required=True)
    sm.add_argument("--n", type=int, required=True)
    sm.add_argument("--seed", type=int)
    sm.add_argument("--out", required=True)
    sm.add_argument("--schema")
    sm.set_defaults(func=cmd_sample)
    return p


CONFIG_ERRORS = (ConfigError, SchemaError, IngestionError, DesignError, RegimeError, KeyError,
                 TypeError, ValueError)
ESTIMATION_ERRORS = (EstimationError, GLMError, BootstrapError, np.linalg.LinAlgError)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ESTIMATION_ERRORS as e:
        print(f"estimation failed: {e}", file=sys.stderr)
        return EXIT_ESTIMATION
    except CONFIG_ERRORS as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
