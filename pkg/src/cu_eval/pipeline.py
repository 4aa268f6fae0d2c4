"""Full estimation recipe: fit nuisance models, compute values and utilities.

A pipeline is prepared once per dataset. Preparation collapses identical
rows into weighted unique rows and builds every design matrix up front, so
a bootstrap replicate only refits models under new frequency weights.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .data import Dataset
from .design import DesignSpec, build_design
from .estimators import (ESTIMATORS, GC_B, GC_NB, IPW_B, IPW_NB, PROPENSITY_FLOOR, SOC,
                         EstimationError, ipw_kernel)
from .glm import (LINEAR, LOGISTIC, MULTINOMIAL, CollinearityWarning, FittedModel,
                  GLMError, fit_linear, fit_logistic, fit_multinomial, predict)
from .regimes import Regime


class StatKey(NamedTuple):
    kind: str        # "value" or "utility"
    estimator: str
    a: str
    b: str | None = None

    def label(self) -> str:
        if self.kind == "value":
            return f"value[{self.estimator}] {self.a}"
        return f"utility[{self.estimator}] {self.a} vs {self.b}"


SOC_KEY = StatKey("value", SOC, "SOC")


@dataclass(frozen=True)
class ModelSpec:
    design: DesignSpec
    family: str

    def to_dict(self) -> dict:
        return {"formula": str(self.design), "coding": self.design.coding, "family": self.family}


@dataclass(frozen=True)
class ModelBundle:
    """Designs of the four nuisance models.

    ``pi_nb`` is multinomial in T, ``pi_b`` logistic in 1[T = f(Z)],
    ``h_b`` must contain CONC and ``h_nb`` must contain T.
    """

    pi_nb: DesignSpec
    pi_b: DesignSpec
    h_b: ModelSpec
    h_nb: ModelSpec
    name: str = "custom"

    def __post_init__(self):
        if not self.h_b.design.uses_concordance:
            raise EstimationError("h_b design must include the concordance term CONC")
        if not self.h_nb.design.uses_treatment:
            raise EstimationError("h_nb design must include treatment terms")
        for d in (self.pi_nb, self.pi_b):
            if d.uses_treatment or d.uses_concordance:
                raise EstimationError("propensity designs may not contain T or CONC")

    def to_dict(self) -> dict:
        return {"name": self.name,
                "pi_nb": {"formula": str(self.pi_nb), "coding": self.pi_nb.coding,
                          "family": MULTINOMIAL},
                "pi_b": {"formula": str(self.pi_b), "coding": self.pi_b.coding,
                         "family": LOGISTIC},
                "h_b": self.h_b.to_dict(), "h_nb": self.h_nb.to_dict()}


@dataclass
class EstimationPipeline:
    bundle: ModelBundle
    regimes: Sequence[Regime]
    estimators: Sequence[str] = ESTIMATORS
    floor: float = PROPENSITY_FLOOR
    weight_cap: float | None = None
    compare_regimes: bool = True

    def __post_init__(self):
        ids = [r.id for r in self.regimes]
        if len(set(ids)) != len(ids):
            raise EstimationError("regime ids must be unique")
        if "SOC" in ids:
            raise EstimationError("'SOC' is reserved")
        for e in self.estimators:
            if e not in ESTIMATORS:
                raise EstimationError(f"unknown estimator {e!r}")

    def prepare(self, ds: Dataset) -> "PreparedPipeline":
        return PreparedPipeline(self, ds)

    def stat_keys(self) -> list[StatKey]:
        keys = [SOC_KEY]
        ids = [r.id for r in self.regimes]
        for e in self.estimators:
            keys += [StatKey("value", e, r) for r in ids]
            keys += [StatKey("utility", e, r, "SOC") for r in ids]
            if self.compare_regimes:
                keys += [StatKey("utility", e, a, b)
                         for i, a in enumerate(ids) for b in ids[i + 1:]]
        return keys


def _row_keys(ds: Dataset) -> np.ndarray:
    cols = [ds.y, ds.t.astype(float)]
    for c in ds.schema.covariates:
        cols.append(ds.z[c.name].astype(float))
    return np.column_stack(cols)


@dataclass(frozen=True, eq=False)
class NuisanceBlock:
    """One fitted nuisance model as it enters the stacked estimating equations."""

    family: str
    X: np.ndarray      # retained columns only
    y: np.ndarray
    beta: np.ndarray


class PreparedPipeline:
    def __init__(self, pipeline: EstimationPipeline, ds: Dataset):
        self.pipeline = pipeline
        self.ds = ds
        keys = _row_keys(ds)
        _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
        self.inverse = inverse.ravel()
        self.base_weights = np.bincount(self.inverse, minlength=first.size).astype(float)
        u = ds.take(first)
        self.unique = u
        b = pipeline.bundle
        self.assign = {r.id: r.assign(u) for r in pipeline.regimes}
        self.conc = {rid: (f == u.t) for rid, f in self.assign.items()}
        ests = set(pipeline.estimators)
        self.X: dict = {}
        if IPW_NB in ests:
            self.X["pi_nb"] = build_design(u, b.pi_nb)
        if IPW_B in ests:
            self.X["pi_b"] = build_design(u, b.pi_b)
        for r in pipeline.regimes:
            if GC_B in ests:
                self.X[("h_b", r.id)] = build_design(u, b.h_b.design, r)
                self.X[("h_b_pred", r.id)] = build_design(
                    u, b.h_b.design, r, concordant=np.ones(u.n))
            if GC_NB in ests:
                self.X[("h_nb_pred", r.id)] = build_design(
                    u, b.h_nb.design, r, treatment=self.assign[r.id])
        if GC_NB in ests:
            self.X["h_nb"] = build_design(u, b.h_nb.design)
        self._starts: dict = {}
        self.models: dict = {}
        self.failures: dict = {}
        self.point_stats: dict | None = None

    @property
    def n(self) -> int:
        return self.ds.n

    def weights_from_indices(self, idx: np.ndarray) -> np.ndarray:
        return np.bincount(self.inverse[idx], minlength=self.unique.n).astype(float)

    # -- fitting ------------------------------------------------------------------
    def _fit(self, key, family, design, outcome, w, spec, point):
        start = self._starts.get(key)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", CollinearityWarning)
            if family == LINEAR:
                m = fit_linear(design.matrix, outcome, w, names=design.names, spec=spec)
            elif family == LOGISTIC:
                m = fit_logistic(design.matrix, outcome, w, names=design.names, spec=spec,
                                 start=start)
            else:
                m = fit_multinomial(design.matrix, outcome, self.ds.k, w, names=design.names,
                                    spec=spec, start=start,
                                    levels=self.ds.schema.treatment_levels)
        if point:
            self._starts[key] = m.full_coef()
        return m

    def fit_models(self, w: np.ndarray, point: bool = False) -> tuple[dict, dict]:
        b = self.pipeline.bundle
        u = self.unique
        ests = set(self.pipeline.estimators)
        models, errors = {}, {}

        def attempt(key, *args):
            try:
                models[key] = self._fit(key, *args, point)
            except (GLMError, np.linalg.LinAlgError) as e:
                errors[key] = str(e)

        if IPW_NB in ests:
            attempt("pi_nb", MULTINOMIAL, self.X["pi_nb"], u.t, w, b.pi_nb)
        if GC_NB in ests:
            attempt("h_nb", b.h_nb.family, self.X["h_nb"], u.y, w, b.h_nb.design)
        for r in self.pipeline.regimes:
            c = self.conc[r.id].astype(float)
            if IPW_B in ests:
                attempt(("pi_b", r.id), LOGISTIC, self.X["pi_b"], c, w, b.pi_b)
            if GC_B in ests:
                attempt(("h_b", r.id), b.h_b.family, self.X[("h_b", r.id)], u.y, w,
                        b.h_b.design)
        return models, errors

    # -- statistics --------------------------------------------------------------------
    def _value(self, e, rid, models, w):
        u = self.unique
        p = self.pipeline
        if e == IPW_NB:
            P = predict(models["pi_nb"], self.X["pi_nb"].matrix)
            pt = P[np.arange(u.n), u.t]
            return ipw_kernel(u.y, self.conc[rid], pt, w, p.floor, p.weight_cap)[0]
        if e == IPW_B:
            pc = predict(models[("pi_b", rid)], self.X["pi_b"].matrix)
            return ipw_kernel(u.y, self.conc[rid], pc, w, p.floor, p.weight_cap)[0]
        if e == GC_B:
            pred = predict(models[("h_b", rid)], self.X[("h_b_pred", rid)].matrix)
        else:
            pred = predict(models["h_nb"], self.X[("h_nb_pred", rid)].matrix)
        return float(np.dot(w, pred) / w.sum())

    def run(self, w: np.ndarray | None = None) -> dict[StatKey, float]:
        """Every statistic under frequency weights ``w`` (default: the data as is).

        A statistic whose model fit or positivity check fails is NaN; the
        reason is kept in ``self.failures`` for point runs.
        """
        point = w is None
        if point:
            w = self.base_weights
        models, errors = self.fit_models(w, point)
        out: dict[StatKey, float] = {SOC_KEY: float(np.dot(w, self.unique.y) / w.sum())}
        fails: dict = {}
        ids = [r.id for r in self.pipeline.regimes]
        for e in self.pipeline.estimators:
            vals = {}
            for rid in ids:
                try:
                    vals[rid] = self._value(e, rid, models, w)
                except KeyError:
                    fails[(e, rid)] = "; ".join(errors.values()) or "model fit failed"
                    vals[rid] = math.nan
                except EstimationError as err:
                    fails[(e, rid)] = str(err)
                    vals[rid] = math.nan
                out[StatKey("value", e, rid)] = vals[rid]
                out[StatKey("utility", e, rid, "SOC")] = vals[rid] - out[SOC_KEY]
            if self.pipeline.compare_regimes:
                for i, a in enumerate(ids):
                    for bid in ids[i + 1:]:
                        out[StatKey("utility", e, a, bid)] = vals[a] - vals[bid]
        if point:
            self.models = models
            self.failures = fails
            self.point_stats = out
        return out

    # -- stacked estimating equations ---------------------------------------------------
    def value_equations(self, e: str, rid: str) -> tuple[list, list, Callable]:
        """Nuisance blocks and the per-row target function for one value.

        Returns ``(keys, blocks, g)`` where ``g(betas)`` maps the list of block
        coefficient arrays to per-row contributions whose weighted mean is
        the value estimate.
        """
        if not self.models:
            self.run()
        u = self.unique
        m = self.models
        p = self.pipeline

        def block(key, family, Xd, y):
            model = m[key]
            return NuisanceBlock(family, Xd.matrix[:, model.kept], y, model.coef)

        if e == SOC:
            return [], [], lambda betas: u.y.copy()
        conc = self.conc[rid]
        if e == IPW_NB:
            key = "pi_nb"
            blk = block(key, MULTINOMIAL, self.X[key], u.t)

            def g(betas, X=blk.X):
                eta = np.hstack([np.zeros((X.shape[0], 1)), X @ betas[0].T])
                eta -= eta.max(axis=1, keepdims=True)
                P = np.exp(eta)
                P /= P.sum(axis=1, keepdims=True)
                return _ipw_rows(u.y, conc, P[np.arange(u.n), u.t], p.weight_cap)
            return [key], [blk], g
        if e == IPW_B:
            key = ("pi_b", rid)
            blk = block(key, LOGISTIC, self.X["pi_b"], conc.astype(float))

            def g(betas, X=blk.X):
                pc = 1.0 / (1.0 + np.exp(-(X @ betas[0])))
                return _ipw_rows(u.y, conc, pc, p.weight_cap)
            return [key], [blk], g
        if e == GC_B:
            key = ("h_b", rid)
            model = m[key]
            blk = block(key, model.family, self.X[key], u.y)
            Xp = self.X[("h_b_pred", rid)].matrix[:, model.kept]
        else:
            key = "h_nb"
            model = m[key]
            blk = block(key, model.family, self.X[key], u.y)
            Xp = self.X[("h_nb_pred", rid)].matrix[:, model.kept]
        if model.family == LOGISTIC:
            return [key], [blk], lambda betas: 1.0 / (1.0 + np.exp(-(Xp @ betas[0])))
        return [key], [blk], lambda betas: Xp @ betas[0]


def _ipw_rows(y, conc, p, cap):
    out = np.zeros_like(y, dtype=float)
    wts = 1.0 / p[conc]
    if cap is not None:
        wts = np.minimum(wts, cap)
    out[conc] = y[conc] * wts
    return out
