"""Value estimators for E[Y(f(Z))] and clinical-utility contrasts.

``ipw_nb`` and ``ipw_b`` reweight regime-concordant rows by an estimated
propensity; ``gc_b`` and ``gc_nb`` average outcome-model predictions with
the concordance indicator (resp. the treatment) set by the regime.
``soc_mean`` is the observed standard of care, the sample mean of Y.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .data import Dataset
from .design import build_design
from .glm import LINEAR, LOGISTIC, MULTINOMIAL, FittedModel, predict
from .regimes import Regime

IPW_NB = "ipw_nb"
IPW_B = "ipw_b"
GC_B = "gc_b"
GC_NB = "gc_nb"
SOC = "soc_mean"
ESTIMATORS = (IPW_B, IPW_NB, GC_B, GC_NB)

PROPENSITY_FLOOR = 1e-6
DEFAULT_WEIGHT_CAP = 100.0


class EstimationError(ValueError):
    pass


class PositivityError(EstimationError):
    """Raised when a used propensity falls below the floor."""

    def __init__(self, rows, probabilities, floor):
        self.rows = [int(r) for r in rows]
        self.probabilities = [float(p) for p in probabilities]
        self.floor = floor
        shown = ", ".join(f"{r + 1}" for r in self.rows[:10])
        more = "" if len(self.rows) <= 10 else f" (+{len(self.rows) - 10} more)"
        super().__init__(f"positivity violation at row {shown}{more}: "
                         f"propensity below {floor:g}")


@dataclass
class ValueEstimate:
    estimator: str
    value: float
    n: int
    regime: str | None = None
    diagnostics: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"estimator": self.estimator, "regime": self.regime, "value": self.value,
                "n": self.n, "diagnostics": self.diagnostics}


@dataclass
class UtilityEstimate:
    """``value = value(a) - value(b)``; ``b`` is ``"SOC"`` for the standard of care."""

    estimator: str
    a: str
    b: str
    value: float
    n: int
    intervals: list = field(default_factory=list)

    @property
    def comparator(self) -> str:
        return f"{self.a} vs {self.b}"

    def to_dict(self) -> dict:
        return {"estimator": self.estimator, "a": self.a, "b": self.b, "value": self.value,
                "n": self.n, "intervals": [ci.to_dict() for ci in self.intervals]}


# -- numeric kernels (frequency-weighted) ---------------------------------------

def ipw_kernel(y: np.ndarray, concordant: np.ndarray, p: np.ndarray,
               w: np.ndarray | None = None, floor: float = PROPENSITY_FLOOR,
               weight_cap: float | None = None) -> tuple[float, dict]:
    """``sum_i w_i y_i c_i / p_i / sum_i w_i`` with positivity guard.

    ``p`` is only inspected where ``concordant`` is true.
    """
    w = np.ones(y.shape[0]) if w is None else w
    c = np.asarray(concordant, dtype=bool)
    used = c & (w > 0)
    total = float(w.sum())
    pu = p[used]
    diag = {"concordance_rate": float(w[c].sum() / total),
            "min_propensity": float(pu.min()) if pu.size else math.nan,
            "n_capped": 0}
    if pu.size and pu.min() < floor and weight_cap is None:
        bad = np.flatnonzero(used)[pu < floor]
        raise PositivityError(bad, p[bad], floor)
    ipw = np.zeros_like(y, dtype=float)
    with np.errstate(divide="ignore"):
        ipw[used] = 1.0 / pu
    if weight_cap is not None:
        over = used & (ipw > weight_cap)
        diag["n_capped"] = int(w[over].sum())
        ipw[over] = weight_cap
    diag["weight_cap"] = weight_cap
    return float(np.dot(w, y * ipw) / total), diag


def _check_model(model, family_ok, what):
    if not isinstance(model, FittedModel):
        return
    if model.family not in family_ok:
        raise EstimationError(f"{what} must be a {' or '.join(family_ok)} model")


def _propensity_design(ds, model, regime):
    if model.spec is None:
        raise EstimationError("fitted model carries no design spec; pass probabilities instead")
    return build_design(ds, model.spec, regime).matrix


# -- public estimators ---------------------------------------------------------------

def soc_mean(ds: Dataset) -> ValueEstimate:
    return ValueEstimate(SOC, float(np.mean(ds.y)), ds.n, None, {})


def ipw_nb(ds: Dataset, regime: Regime, propensity, *, floor: float = PROPENSITY_FLOOR,
           weight_cap: float | None = None) -> ValueEstimate:
    """IPW with the multinomial propensity ``p(T = t_i | z_i)``.

    ``propensity`` is a fitted multinomial model, an ``n x k`` probability
    matrix, or a length-``n`` vector of ``p(T = t_i | z_i)``.
    """
    f = regime.assign(ds)
    conc = f == ds.t
    if isinstance(propensity, FittedModel):
        _check_model(propensity, (MULTINOMIAL,), "ipw_nb propensity")
        P = predict(propensity, _propensity_design(ds, propensity, regime))
    else:
        P = np.asarray(propensity, dtype=float)
    if P.ndim == 2:
        if P.shape[1] != ds.k:
            raise EstimationError("propensity must predict every treatment level")
        p = P[np.arange(ds.n), ds.t]
    else:
        p = P
    value, diag = ipw_kernel(ds.y, conc, p, None, floor, weight_cap)
    return ValueEstimate(IPW_NB, value, ds.n, regime.id, diag)


def ipw_b(ds: Dataset, regime: Regime, propensity, *, floor: float = PROPENSITY_FLOOR,
          weight_cap: float | None = None) -> ValueEstimate:
    """IPW with the binary propensity ``p(1[t_i = f(z_i)] = 1 | z_i)``."""
    f = regime.assign(ds)
    conc = f == ds.t
    if isinstance(propensity, FittedModel):
        _check_model(propensity, (LOGISTIC,), "ipw_b propensity")
        p = predict(propensity, _propensity_design(ds, propensity, regime))
    else:
        p = np.asarray(propensity, dtype=float)
    value, diag = ipw_kernel(ds.y, conc, p, None, floor, weight_cap)
    return ValueEstimate(IPW_B, value, ds.n, regime.id, diag)


def gc_b(ds: Dataset, regime: Regime, outcome_model: FittedModel) -> ValueEstimate:
    """Mean prediction of an outcome model with its concordance term forced to 1."""
    spec = outcome_model.spec
    if spec is None or not spec.uses_concordance:
        raise EstimationError("gc_b outcome model must include the concordance term CONC")
    _check_model(outcome_model, (LINEAR, LOGISTIC), "gc_b outcome model")
    X = build_design(ds, spec, regime, concordant=np.ones(ds.n)).matrix
    pred = predict(outcome_model, X)
    conc = regime.assign(ds) == ds.t
    return ValueEstimate(GC_B, float(np.mean(pred)), ds.n, regime.id,
                         {"concordance_rate": float(conc.mean())})


def gc_nb(ds: Dataset, regime: Regime, outcome_model: FittedModel) -> ValueEstimate:
    """Mean prediction of an outcome model with the treatment set to ``f(z_i)``."""
    spec = outcome_model.spec
    if spec is None or not spec.uses_treatment:
        raise EstimationError("gc_nb outcome model must include treatment terms")
    _check_model(outcome_model, (LINEAR, LOGISTIC), "gc_nb outcome model")
    f = regime.assign(ds)
    X = build_design(ds, spec, regime, treatment=f).matrix
    pred = predict(outcome_model, X)
    return ValueEstimate(GC_NB, float(np.mean(pred)), ds.n, regime.id,
                         {"concordance_rate": float(np.mean(f == ds.t))})


def clinical_utility(a: ValueEstimate, b: ValueEstimate) -> UtilityEstimate:
    """``a.value - b.value``; both estimates must come from the same dataset."""
    if a.n != b.n:
        raise EstimationError(f"estimates come from different datasets (n={a.n} vs n={b.n})")
    if a.estimator == b.estimator or b.estimator == SOC:
        est = a.estimator
    elif a.estimator == SOC:
        est = b.estimator
    else:
        est = f"{a.estimator}/{b.estimator}"

    def ident(v: ValueEstimate) -> str:
        return "SOC" if v.estimator == SOC else (v.regime or v.estimator)

    return UtilityEstimate(est, ident(a), ident(b), a.value - b.value, a.n)
