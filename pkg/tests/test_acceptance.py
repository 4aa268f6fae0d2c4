"""Acceptance criteria, one test per criterion.

Monte Carlo scale comes from the environment:

* ``CU_EVAL_ACCEPT_ITERS`` replications per configuration (default 500)
* ``CU_EVAL_ACCEPT_BOOT`` bootstrap replicates (default 500)
* ``CU_EVAL_WORKERS`` worker processes (default 1)

Below 2000 replications the coverage band widens from [0.93, 0.97] to
[0.92, 0.98].
"""
import os
import time
from fractions import Fraction

import numpy as np
import pytest

from cu_eval import simulation as sim
from cu_eval.design import build_design, saturated
from cu_eval.estimators import ESTIMATORS, GC_B, GC_NB, IPW_B, IPW_NB
from cu_eval.glm import LINEAR, LOGISTIC, MULTINOMIAL, fit_logistic, fit_multinomial, predict
from cu_eval.inference import bootstrap_ci, sandwich_ci
from cu_eval.pipeline import EstimationPipeline, StatKey
from cu_eval.regimes import learn_rff_regime

import conftest
from test_glm import fd_gradient, random_instance, rel_err
from cu_eval.glm import score

ITERS = int(os.environ.get("CU_EVAL_ACCEPT_ITERS", "500"))
BOOT = int(os.environ.get("CU_EVAL_ACCEPT_BOOT", "500"))
WORKERS = int(os.environ.get("CU_EVAL_WORKERS", "1"))
BAND = (0.93, 0.97) if ITERS >= 2000 else (0.92, 0.98)
SEED = 2024

_reports: dict = {}


def report(setting, n):
    if (setting, n) not in _reports:
        _reports[(setting, n)] = sim.run_monte_carlo(setting, n, ITERS, BOOT, ESTIMATORS,
                                                     ("bootstrap",), SEED, WORKERS)
    return _reports[(setting, n)]


def metrics(setting, n):
    rep = report(setting, n)
    return {e: rep.metrics(e, rep.ci_methods[0]) for e in ESTIMATORS}


def record(k, ok, detail):
    conftest.CRITERIA[k] = (bool(ok), detail)
    assert ok, detail


def fmt(m):
    return f"bias {m['bias']:+.4f} se {m['se']:.4f} cov {m['coverage']:.3f}"


def test_criterion_1_oracle():
    t0 = time.perf_counter()
    ok = (sim.oracle_truth(sim.UNIFORM, sim.F_OPT).regime_value == Fraction(7, 30)
          and sim.oracle_truth(sim.UNIFORM, sim.STATIC_2).regime_value == Fraction(3, 10)
          and sim.oracle_truth(sim.UNIFORM, sim.F_OPT).mean_outcome == Fraction(11, 30)
          and sim.oracle_truth(sim.S2_ALLOCATION, sim.F2).utility == 0)
    vals, denom = sim.all_cell_regime_values()
    f_opt = sum((a - 1) * 3 ** c for c, a in enumerate(sim.regime_cell_arms(sim.F_OPT)))
    optimal = vals.size == 531441 and vals[f_opt] == vals.min() and \
        Fraction(int(vals.min()), denom) == Fraction(7, 30)
    dt = time.perf_counter() - t0
    record(1, ok and optimal and dt < 60,
           f"exact truths {ok}, f_opt optimal over {vals.size} regimes {optimal}, {dt:.1f}s")


def test_criterion_2_correct_specification():
    lines, ok = [], True
    for s in ("S1", "S2", "S3"):
        m = metrics(s, 2000)
        for e in ESTIMATORS:
            good = abs(m[e]["bias"]) <= 0.005 and BAND[0] <= m[e]["coverage"] <= BAND[1]
            ok &= good
            if not good:
                lines.append(f"{s} {e} {fmt(m[e])}")
        smallest = min(ESTIMATORS, key=lambda e: m[e]["se"])
        ok &= smallest == GC_NB
        if smallest != GC_NB:
            lines.append(f"{s} smallest SE is {smallest}")
    record(2, ok, f"{ITERS} iters, B={BOOT}, band {BAND}" +
           ("" if ok else ": " + "; ".join(lines)))


def test_criterion_3_small_sample_ipw():
    small, large = metrics("S2", 200), metrics("S2", 2000)
    parts, ok = [], True
    for e in (IPW_B, IPW_NB):
        good = (abs(small[e]["bias"]) >= 5 * abs(large[e]["bias"])
                and small[e]["coverage"] < 0.80)
        ok &= good
        parts.append(f"{e} n=200 {fmt(small[e])} vs n=2000 bias {large[e]['bias']:+.4f}")
    gc = small[GC_NB]["coverage"] >= 0.93
    parts.append(f"gc_nb n=200 cov {small[GC_NB]['coverage']:.3f}")
    record(3, ok and gc, "; ".join(parts))


def test_criterion_4_misspecification():
    m = metrics("S2M", 2000)
    gcb = abs(m[GC_B]["bias"]) >= 0.05 and m[GC_B]["coverage"] <= 0.5
    others = [e for e in ESTIMATORS if e != GC_B and m[e]["coverage"] < 0.90]
    record(4, gcb and len(others) >= 2,
           f"gc_b {fmt(m[GC_B])}; below 0.90: {', '.join(others) or 'none'}")


def test_criterion_5_ipw_identity():
    worst = 0.0
    for i in range(1000):
        s = ("S1", "S2", "S3")[i % 3]
        setting = sim.get_setting(s)
        ds = sim.sample_population(setting, 2000, [SEED, 5, i])
        pipe = EstimationPipeline(sim.CORRECT_MODELS, [setting.regime], (IPW_B, IPW_NB),
                                  compare_regimes=False)
        out = pipe.prepare(ds).run()
        rid = setting.regime.id
        worst = max(worst, abs(out[StatKey("value", IPW_B, rid)]
                               - out[StatKey("value", IPW_NB, rid)]))
    record(5, worst <= 1e-10, f"max |ipw_b - ipw_nb| over 1000 draws = {worst:.2e}")


def test_criterion_6_glm():
    worst = {}
    for fam, seed in ((LINEAR, 11), (LOGISTIC, 12), (MULTINOMIAL, 13)):
        rng = np.random.default_rng(seed)
        worst[fam] = 0.0
        for _ in range(100):
            X, y, w, beta = random_instance(rng, fam)
            worst[fam] = max(worst[fam], rel_err(score(fam, beta, X, y, w).ravel(),
                                                 fd_gradient(fam, beta, X, y, w)))
    ds = sim.sample_population("S1", 2000, SEED)
    spec = saturated(("z1", "z2"))
    X = build_design(ds, spec).matrix
    cells = ds.codes("z1") * 2 + ds.codes("z2")
    p = predict(fit_logistic(X, ds.y), X)
    P = predict(fit_multinomial(X, ds.t, 3), X)
    sat = 0.0
    for c in range(12):
        r = cells == c
        sat = max(sat, np.max(np.abs(p[r] - ds.y[r].mean())),
                  np.max(np.abs(P[r] - np.bincount(ds.t[r], minlength=3) / r.sum())))
    ok = max(worst.values()) <= 1e-4 and sat <= 1e-8
    record(6, ok, "gradient rel. error " +
           ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; saturated {sat:.1e}")


def test_criterion_7_inference():
    ds = sim.sample_population("S1", 2000, SEED)
    se = sandwich_ci(ds, "soc_mean").se
    closed = np.sqrt(np.mean((ds.y - ds.y.mean()) ** 2) / ds.n)
    pipe = EstimationPipeline(sim.CORRECT_MODELS, [sim.F_OPT], compare_regimes=False)
    a = bootstrap_ci(ds, pipe, B=100, seed=SEED)
    b = bootstrap_ci(ds, pipe, B=100, seed=SEED)
    c = bootstrap_ci(ds, pipe, B=100, seed=SEED, workers=3)
    ok = abs(se - closed) <= 1e-10 and a == b == c
    record(7, ok, f"|sandwich - closed form| = {abs(se - closed):.1e}; "
                  f"bootstrap repeat identical {a == b}, 1 vs 3 workers identical {a == c}")


def test_criterion_8_rff():
    cells = sim._cell_dataset()
    ref = sim.F_OPT.assign(cells)
    agree = []
    for seed in range(10):
        ds = sim.sample_population("S1", 5000, [SEED, 8, seed])
        agree.append(int(np.sum(learn_rff_regime(ds, seed=seed).assign(cells) == ref)))
    passed = sum(a >= 0.9 * 12 for a in agree)
    record(8, passed >= 8, f"cells agreeing per seed {agree}; {passed}/10 seeds at >= 90%")


# invariants that reuse the cached Monte Carlo reports

def test_s2_null_grand_mean():
    m = metrics("S2", 2000)
    for e in ESTIMATORS:
        assert abs(m[e]["bias"]) <= 3 * m[e]["mc_se_bias"], (e, m[e]["bias"], m[e]["mc_se_bias"])


def test_ipw_worse_at_small_n():
    small, large = metrics("S2", 200), metrics("S2", 2000)
    for e in (IPW_B, IPW_NB):
        assert abs(small[e]["bias"]) > abs(large[e]["bias"]) and small[e]["se"] > large[e]["se"]
