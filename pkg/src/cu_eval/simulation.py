"""Synthetic populations, exact enumeration truths and the Monte Carlo study.

Covariates: Z1 uniform on {0, 0.2, ..., 1.0}, Z2 ~ Bernoulli(0.7). The
outcome risk is

    t=1: 0.5 + 0.5 z1 - 0.5 z2
    t=2: 0.65 - 0.5 z2
    t=3: 1 - 0.5 z1 - 0.5 z2

and Y = 0 is the desired outcome. Truths are computed with exact rational
arithmetic over the 12 covariate cells.
"""
from __future__ import annotations

import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Mapping, Sequence

import numpy as np

from .data import BINARY, CATEGORICAL, CellIndex, ColumnSpec, Dataset, Schema
from .design import DesignSpec, saturated
from .estimators import ESTIMATORS, GC_B, GC_NB, IPW_B, IPW_NB
from .glm import LINEAR, LOGISTIC
from .inference import BOOTSTRAP, SANDWICH, bootstrap_ci, ci_method, pipeline_sandwich
from .pipeline import EstimationPipeline, ModelBundle, ModelSpec, StatKey
from .regimes import LookupRegime, Regime, StaticRegime

Z1_LEVELS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
Z1_EXACT = tuple(Fraction(i, 5) for i in range(6))
Z2_LEVELS = (0, 1)
P_Z2 = Fraction(7, 10)
TREATMENTS = (1, 2, 3)
SETTINGS_ORDER = ("S1", "S2", "S3", "S2M")

SIM_SCHEMA = Schema(
    (ColumnSpec("y", BINARY),
     ColumnSpec("t", CATEGORICAL, TREATMENTS),
     ColumnSpec("z1", CATEGORICAL, Z1_LEVELS),
     ColumnSpec("z2", CATEGORICAL, Z2_LEVELS)),
    outcome="y", treatment="t")
CELLS = CellIndex.for_schema(SIM_SCHEMA, ("z1", "z2"))


def risk(z1, z2, t: int):
    """P(Y = 1 | z1, z2, t); exact when given Fractions."""
    half = Fraction(1, 2) if isinstance(z1, Fraction) else 0.5
    if t == 1:
        return half + half * z1 - half * z2
    if t == 2:
        return (Fraction(13, 20) if isinstance(z1, Fraction) else 0.65) - half * z2
    if t == 3:
        return 1 - half * z1 - half * z2
    raise ValueError(f"unknown treatment {t!r}")


def cell_probability(cell: int) -> Fraction:
    i1, i2 = CELLS.codes_of(cell)
    return Fraction(1, 6) * (P_Z2 if i2 == 1 else 1 - P_Z2)


def cell_covariates(cell: int) -> tuple[Fraction, int]:
    i1, i2 = CELLS.codes_of(cell)
    return Z1_EXACT[i1], Z2_LEVELS[i2]


# -- allocation mechanisms ------------------------------------------------------------

@dataclass(frozen=True)
class AllocationMechanism:
    """Treatment probabilities (p1, p2, p3) per covariate cell, exact."""

    name: str
    table: tuple[tuple[Fraction, Fraction, Fraction], ...]  # indexed by cell id

    def __post_init__(self):
        if len(self.table) != CELLS.n_cells:
            raise ValueError("allocation needs one probability triple per cell")
        for cell, probs in enumerate(self.table):
            if sum(probs) != 1:
                raise ValueError(f"cell {CELLS.key(cell)}: probabilities do not sum to 1")
            if min(probs) < Fraction(1, 50):
                raise ValueError(f"cell {CELLS.key(cell)}: probability below 0.02")

    def as_array(self) -> np.ndarray:
        return np.array([[float(p) for p in row] for row in self.table])

    @classmethod
    def from_z1(cls, name: str, side: Mapping[int, tuple], by_z2: bool = False):
        """Build from side-arm probabilities ``(p1, p3)``; arm 2 takes the rest.

        ``side`` maps a z1 index (or ``(z1 index, z2)`` when ``by_z2``) to
        the pair of exact probabilities.
        """
        rows = []
        for cell in range(CELLS.n_cells):
            i1, i2 = CELLS.codes_of(cell)
            p1, p3 = side[(i1, Z2_LEVELS[i2])] if by_z2 else side[i1]
            p1, p3 = Fraction(p1), Fraction(p3)
            rows.append((p1, 1 - p1 - p3, p3))
        return cls(name, tuple(rows))


UNIFORM = AllocationMechanism(
    "uniform", tuple((Fraction(1, 3),) * 3 for _ in range(CELLS.n_cells)))


def _f(x: str) -> Fraction:
    return Fraction(x)


# Arm 2 dominates. Side arms (p1, p3) per (z1 index, z2): the arm f2 recommends
# is likelier when z2 = 1, so concordant rows over-represent low-risk patients
# and any model that omits z2 is biased. Chosen so the observed mean outcome
# is exactly 0.30 (checked by the oracle at import).
S2_ALLOCATION = AllocationMechanism.from_z1("s2-concentrated", {
    (0, 0): (_f("0.06"), _f("0.02")), (0, 1): (_f("0.14"), _f("0.02")),
    (1, 0): (_f("0.08"), _f("0.02")), (1, 1): (_f("0.14"), _f("0.02")),
    (2, 0): (_f("0.08"), _f("0.02")), (2, 1): (_f("0.04"), _f("0.02")),
    (3, 0): (_f("0.02"), _f("0.08")), (3, 1): (_f("0.02"), _f("0.08")),
    (4, 0): (_f("0.06"), _f("0.026")), (4, 1): (_f("0.04"), _f("0.026")),
    (5, 0): (_f("0.02"), _f("0.08")), (5, 1): (_f("0.02"), _f("0.14")),
}, by_z2=True)


# -- regimes ---------------------------------------------------------------------------

def z1_regime(arms: Sequence[int], id: str) -> LookupRegime:
    return LookupRegime(("z1",), {(z,): a for z, a in zip(Z1_LEVELS, arms)}, id=id)


F_OPT_ARMS = (1, 1, 2, 2, 3, 3)
F2_ARMS = (1, 1, 1, 3, 1, 3)
F_OPT = z1_regime(F_OPT_ARMS, "f_opt")
F2 = z1_regime(F2_ARMS, "f2")
STATIC_2 = StaticRegime(2, "static-2")


def _cell_dataset() -> Dataset:
    codes = [CELLS.codes_of(c) for c in range(CELLS.n_cells)]
    return Dataset(SIM_SCHEMA, np.zeros(CELLS.n_cells), np.zeros(CELLS.n_cells, dtype=int),
                   {"z1": [c[0] for c in codes], "z2": [c[1] for c in codes]})


def regime_cell_arms(regime: Regime) -> tuple[int, ...]:
    """Treatment label the regime assigns to each of the 12 cells."""
    return tuple(TREATMENTS[c] for c in regime.assign(_cell_dataset()))


# -- oracle ------------------------------------------------------------------------------

@dataclass(frozen=True)
class OracleTruth:
    mean_outcome: Fraction      # E[Y] under the allocation
    regime_value: Fraction      # E[Y(f(Z))]

    @property
    def utility(self) -> Fraction:
        return self.regime_value - self.mean_outcome

    def to_dict(self) -> dict:
        return {"E[Y]": str(self.mean_outcome), "E[Y(f)]": str(self.regime_value),
                "utility": str(self.utility), "E[Y]_float": float(self.mean_outcome),
                "E[Y(f)]_float": float(self.regime_value), "utility_float": float(self.utility)}


def oracle_truth(allocation: AllocationMechanism, regime: Regime | Sequence[int]) -> OracleTruth:
    """Exact E[Y], E[Y(f)] by summing the risk function over the 12 cells.

    ``regime`` may also be given directly as the 12 per-cell arms.
    """
    arms = regime_cell_arms(regime) if isinstance(regime, Regime) else tuple(regime)
    if len(arms) != CELLS.n_cells:
        raise ValueError("need one arm per cell")
    ey = Fraction(0)
    eyf = Fraction(0)
    for cell in range(CELLS.n_cells):
        pc = cell_probability(cell)
        z1, z2 = cell_covariates(cell)
        ey += pc * sum(p * risk(z1, z2, t) for p, t in zip(allocation.table[cell], TREATMENTS))
        eyf += pc * risk(z1, z2, arms[cell])
    return OracleTruth(ey, eyf)


def all_cell_regime_values() -> tuple[np.ndarray, int]:
    """Values of all 3^12 deterministic cell regimes as exact integer numerators.

    Returns ``(numerators, denominator)``; regime ``r`` assigns arm
    ``(r // 3**c) % 3 + 1`` to cell ``c``.
    """
    denom = 1200  # P(cell) * 60 and risk * 20 are integers
    table = np.zeros((CELLS.n_cells, 3), dtype=np.int64)
    for cell in range(CELLS.n_cells):
        pc = cell_probability(cell) * 60
        z1, z2 = cell_covariates(cell)
        for j, t in enumerate(TREATMENTS):
            v = pc * risk(z1, z2, t) * 20
            assert v.denominator == 1
            table[cell, j] = int(v)
    ids = np.arange(3 ** CELLS.n_cells, dtype=np.int64)
    total = np.zeros_like(ids)
    for cell in range(CELLS.n_cells):
        total += table[cell][(ids // 3 ** cell) % 3]
    return total, denom


# -- model presets -------------------------------------------------------------------

CORRECT_MODELS = ModelBundle(
    pi_nb=saturated(("z1", "z2")),
    pi_b=saturated(("z1", "z2")),
    h_b=ModelSpec(saturated(("z1", "z2"), concordance=True), LOGISTIC),
    h_nb=ModelSpec(DesignSpec.parse("T + T:N(z1) + N(z2)"), LINEAR),
    name="correct",
)

MISSPECIFIED_MODELS = ModelBundle(
    pi_nb=DesignSpec.parse("1 + N(z1)"),
    pi_b=DesignSpec.parse("1 + N(z1) + N(z2)"),
    h_b=ModelSpec(DesignSpec.parse("1 + N(z1) + CONC"), LOGISTIC),
    h_nb=ModelSpec(DesignSpec.parse("T + N(z1) + N(z2)"), LINEAR),
    name="misspecified",
)

PRESETS = {"correct": CORRECT_MODELS, "misspecified": MISSPECIFIED_MODELS}


# -- settings --------------------------------------------------------------------------

@dataclass(frozen=True)
class SimulationSetting:
    id: str
    allocation: AllocationMechanism
    regime: Regime
    models: ModelBundle
    truth: OracleTruth
    description: str = ""

    def __post_init__(self):
        recomputed = oracle_truth(self.allocation, self.regime)
        if recomputed != self.truth:
            raise ValueError(f"{self.id}: stored oracle truth does not match enumeration "
                             f"({recomputed} != {self.truth})")


SETTINGS: dict[str, SimulationSetting] = {
    "S1": SimulationSetting(
        "S1", UNIFORM, F_OPT, CORRECT_MODELS,
        OracleTruth(Fraction(11, 30), Fraction(7, 30)),
        "uniform allocation; optimal regime"),
    "S2": SimulationSetting(
        "S2", S2_ALLOCATION, F2, CORRECT_MODELS,
        OracleTruth(Fraction(3, 10), Fraction(3, 10)),
        "arm-2 dominated allocation; regime with the same mean outcome (null utility)"),
    "S3": SimulationSetting(
        "S3", UNIFORM, STATIC_2, CORRECT_MODELS,
        OracleTruth(Fraction(11, 30), Fraction(3, 10)),
        "uniform allocation; static arm 2 (sub-optimal improvement)"),
    "S2M": SimulationSetting(
        "S2M", S2_ALLOCATION, F2, MISSPECIFIED_MODELS,
        OracleTruth(Fraction(3, 10), Fraction(3, 10)),
        "S2 data-generating process with misspecified models"),
}


def get_setting(setting: str | SimulationSetting) -> SimulationSetting:
    if isinstance(setting, SimulationSetting):
        return setting
    try:
        return SETTINGS[setting]
    except KeyError:
        raise KeyError(f"unknown setting {setting!r}; valid settings: "
                       f"{', '.join(SETTINGS)}") from None


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(list(seed) if isinstance(seed, (list, tuple)) else seed)


def sample_population(setting: str | SimulationSetting, n: int, seed) -> Dataset:
    """Draw ``n`` i.i.d. rows (y, t, z1, z2) from the setting's data-generating process."""
    if n < 1:
        raise ValueError("n must be at least 1")
    s = get_setting(setting)
    rng = _rng(seed)
    z1 = rng.integers(0, len(Z1_LEVELS), n)
    z2 = (rng.random(n) < float(P_Z2)).astype(np.int64)
    cell = z1 * 2 + z2
    cum = np.cumsum(s.allocation.as_array(), axis=1)[:, :2]
    t = (rng.random(n)[:, None] >= cum[cell]).sum(axis=1)
    z1v = np.asarray(Z1_LEVELS)[z1]
    p = 0.5 + 0.5 * z1v - 0.5 * z2
    p = np.where(t == 1, 0.65 - 0.5 * z2, p)
    p = np.where(t == 2, 1.0 - 0.5 * z1v - 0.5 * z2, p)
    y = (rng.random(n) < p).astype(float)
    return Dataset(SIM_SCHEMA, y, t, {"z1": z1, "z2": z2})


# -- Monte Carlo ----------------------------------------------------------------------

def setting_code(setting_id: str) -> int:
    return zlib.crc32(setting_id.encode("utf-8"))


@dataclass
class ReplicationResult:
    index: int
    estimates: dict[str, float]
    intervals: dict[tuple[str, str], tuple[float, float, float]]  # (est, method) -> lo, hi, se
    errors: dict[str, str] = field(default_factory=dict)


def run_replication(setting: SimulationSetting, n: int, index: int, n_boot: int,
                    estimators: Sequence[str], ci_methods: Sequence[str], seed: int,
                    level: float = 0.95) -> ReplicationResult:
    base = [int(seed), setting_code(setting.id), int(index)]
    ds = sample_population(setting, n, base + [0])
    pipe = EstimationPipeline(setting.models, [setting.regime], tuple(estimators),
                              compare_regimes=False)
    prepared = pipe.prepare(ds)
    point = prepared.run()
    rid = setting.regime.id
    keys = {e: StatKey("utility", e, rid, "SOC") for e in estimators}
    estimates = {e: point[k] for e, k in keys.items()}
    errors = {e: prepared.failures[(e, rid)] for e in estimators if (e, rid) in prepared.failures}
    intervals: dict = {}
    for method in ci_methods:
        if method == BOOTSTRAP:
            cis = bootstrap_ci(ds, pipe, n_boot, base + [1], level, strict=False,
                               prepared=prepared)
        elif method == SANDWICH:
            cis = pipeline_sandwich(prepared, level, list(keys.values()))
        else:
            raise ValueError(f"unknown CI method {method!r}")
        for e, k in keys.items():
            if k in cis:
                ci = cis[k]
                intervals[(e, method)] = (ci.lower, ci.upper, ci.se)
    return ReplicationResult(index, estimates, intervals, errors)


def _run_chunk(args) -> list[ReplicationResult]:
    setting_id, n, indices, n_boot, estimators, ci_methods, seed, level = args
    s = get_setting(setting_id)
    return [run_replication(s, n, i, n_boot, estimators, ci_methods, seed, level)
            for i in indices]


@dataclass
class MonteCarloReport:
    setting: str
    n: int
    n_iter: int
    n_boot: int
    seed: int
    truth: Fraction
    estimators: tuple[str, ...]
    ci_methods: tuple[str, ...]
    replications: list[ReplicationResult]
    level: float = 0.95

    def estimates(self, estimator: str) -> np.ndarray:
        return np.array([r.estimates.get(estimator, math.nan) for r in self.replications])

    def interval_array(self, estimator: str, method: str) -> np.ndarray:
        nan3 = (math.nan, math.nan, math.nan)
        method = ci_method(method)
        return np.array([r.intervals.get((estimator, method), nan3) for r in self.replications])

    def metrics(self, estimator: str, method: str | None = None) -> dict[str, Any]:
        """Bias, empirical SE, coverage and their Monte Carlo standard errors."""
        est = self.estimates(estimator)
        ok = np.isfinite(est)
        vals = est[ok]
        R = int(ok.sum())
        truth = float(self.truth)
        out: dict[str, Any] = {"setting": self.setting, "n": self.n, "estimator": estimator,
                               "truth": truth, "n_ok": R, "n_failed": self.n_iter - R}
        if R:
            mean = math.fsum(vals) / R
            se = float(np.sqrt(math.fsum((vals - mean) ** 2) / (R - 1))) if R > 1 else math.nan
            out.update(mean_estimate=mean, bias=mean - truth, se=se,
                       mc_se_bias=se / math.sqrt(R) if R > 1 else math.nan,
                       mc_se_se=se / math.sqrt(2 * (R - 1)) if R > 1 else math.nan)
        else:
            out.update(mean_estimate=math.nan, bias=math.nan, se=math.nan,
                       mc_se_bias=math.nan, mc_se_se=math.nan)
        if method is not None:
            iv = self.interval_array(estimator, method)
            has = np.isfinite(iv[:, 0]) & ok
            C = int(has.sum())
            covered = (iv[has, 0] <= truth) & (truth <= iv[has, 1])
            cov = math.fsum(covered.astype(float)) / C if C else math.nan
            out.update(ci_method=method, n_ci=C, ci_failed=R - C, coverage=cov,
                       mc_se_coverage=math.sqrt(cov * (1 - cov) / C) if C else math.nan,
                       mean_width=math.fsum(iv[has, 1] - iv[has, 0]) / C if C else math.nan,
                       mean_se_estimate=math.fsum(iv[has, 2]) / C if C else math.nan)
        return out

    def rows(self) -> list[dict[str, Any]]:
        rows = []
        for e in self.estimators:
            for m in (self.ci_methods or (None,)):
                r = self.metrics(e, m)
                r["B_x100"] = r["bias"] * 100
                r["SE_x10"] = r["se"] * 10
                r["Co"] = r.get("coverage", math.nan)
                rows.append(r)
        return rows


def run_monte_carlo(setting: str | SimulationSetting, n: int, n_iter: int, n_boot: int = 500,
                    estimators: Sequence[str] = ESTIMATORS,
                    ci_methods: Sequence[str] = (BOOTSTRAP,), seed: int = 0,
                    workers: int = 1, level: float = 0.95) -> MonteCarloReport:
    """Repeat sample -> fit -> estimate -> interval ``n_iter`` times.

    Replication ``i`` draws its data from the stream ``(seed, setting, i)``,
    so the report is identical for any number of workers.
    """
    s = get_setting(setting)
    if s.id not in SETTINGS:
        raise KeyError(f"unknown setting {s.id!r}; valid settings: {', '.join(SETTINGS)}")
    for e in estimators:
        if e not in ESTIMATORS:
            raise ValueError(f"unknown estimator {e!r}")
    ci_methods = tuple(ci_method(m) for m in ci_methods)
    indices = list(range(n_iter))
    args = (s.id, n, None, n_boot, tuple(estimators), ci_methods, seed, level)
    if workers <= 1:
        reps = _run_chunk(args[:2] + (indices,) + args[3:])
    else:
        chunks = [c.tolist() for c in np.array_split(np.arange(n_iter), workers * 4) if c.size]
        with ProcessPoolExecutor(workers) as pool:
            parts = pool.map(_run_chunk, [args[:2] + (c,) + args[3:] for c in chunks])
            reps = [r for part in parts for r in part]
    reps.sort(key=lambda r: r.index)
    return MonteCarloReport(s.id, n, n_iter, n_boot, seed, s.truth.utility, tuple(estimators),
                            tuple(ci_methods), reps, level)
