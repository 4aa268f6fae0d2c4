"""One-shot analysis of a dataset: utilities of each regime versus SOC (and each other) with intervals."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset
from .estimators import (GC_B, GC_NB, IPW_B, IPW_NB, PROPENSITY_FLOOR, PositivityError,
                         UtilityEstimate, ipw_b, ipw_nb)
from .inference import BOOTSTRAP, bootstrap_ci, ci_method, pipeline_sandwich
from .pipeline import EstimationPipeline, ModelBundle
from .regimes import Regime


class AnalysisError(RuntimeError):
    """Estimation failed; ``diagnostics`` holds one dict per offending row or statistic."""

    def __init__(self, message: str, diagnostics: list[dict]):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class AnalysisResult:
    utilities: list[UtilityEstimate]
    diagnostics: list[dict]
    values: dict = field(default_factory=dict)


def _diagnostic_rows(prepared, regimes, estimators, floor, cap) -> list[dict]:
    """Per (regime, estimator) summary, recomputed on the full data."""
    ds = prepared.ds
    rows = []
    for r in regimes:
        for e in estimators:
            row = {"regime": r.id, "estimator": e, "status": "ok"}
            reason = prepared.failures.get((e, r.id))
            try:
                if e == IPW_NB and "pi_nb" in prepared.models:
                    row.update(ipw_nb(ds, r, prepared.models["pi_nb"], floor=floor,
                                      weight_cap=cap).diagnostics)
                elif e == IPW_B and ("pi_b", r.id) in prepared.models:
                    row.update(ipw_b(ds, r, prepared.models[("pi_b", r.id)], floor=floor,
                                     weight_cap=cap).diagnostics)
                else:
                    row["concordance_rate"] = float(np.mean(r.assign(ds) == ds.t))
            except PositivityError as err:
                for i, p in zip(err.rows, err.probabilities):
                    rows.append({"regime": r.id, "estimator": e, "status": "positivity",
                                 "row": i + 1, "propensity": p, "message": str(err)})
                continue
            if reason:
                row.update(status="failed", message=reason)
            rows.append(row)
    return rows


def analyze(ds: Dataset, bundle: ModelBundle, regimes: Sequence[Regime],
            estimators: Sequence[str] = (IPW_B, IPW_NB, GC_B, GC_NB),
            ci_methods: Sequence[str] = ("bootstrap",), level: float = 0.95, B: int = 500,
            seed=0, workers: int = 1, floor: float = PROPENSITY_FLOOR,
            weight_cap: float | None = None, compare_regimes: bool = True) -> AnalysisResult:
    ids = [r.id for r in regimes]
    if len(set(ids)) != len(ids):
        raise ValueError(f"regime ids must be unique: {ids}")
    methods = [ci_method(m) for m in ci_methods]
    pipe = EstimationPipeline(bundle, list(regimes), tuple(estimators), floor, weight_cap,
                              compare_regimes)
    prepared = pipe.prepare(ds)
    point = prepared.run()
    diags = _diagnostic_rows(prepared, regimes, estimators, floor, weight_cap)
    if prepared.failures:
        bad = "; ".join(f"{e} for {rid}: {msg}" for (e, rid), msg in prepared.failures.items())
        raise AnalysisError(f"estimation failed ({bad})", diags)
    intervals: dict = {}
    for m in methods:
        if m == BOOTSTRAP:
            cis = bootstrap_ci(ds, pipe, B, seed, level, workers, strict=True, prepared=prepared)
        else:
            cis = pipeline_sandwich(prepared, level)
        for k, ci in cis.items():
            intervals.setdefault(k, []).append(ci)
    utilities = []
    for key in pipe.stat_keys():
        if key.kind != "utility":
            continue
        v = point[key]
        if not math.isfinite(v):
            raise AnalysisError(f"{key.label()} is not finite", diags)
        utilities.append(UtilityEstimate(key.estimator, key.a, key.b, v, ds.n,
                                         intervals.get(key, [])))
    values = {k.label(): v for k, v in point.items() if k.kind == "value"}
    return AnalysisResult(utilities, diags, values)

