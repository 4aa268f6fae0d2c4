"""Confidence intervals: nonparametric percentile bootstrap and stacked
M-estimation (sandwich) Wald intervals."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from scipy.stats import norm

from .data import Dataset
from .design import build_design
from .estimators import GC_B, GC_NB, IPW_B, IPW_NB, SOC, EstimationError
from .glm import LOGISTIC, MULTINOMIAL, FittedModel, information, row_scores
from .pipeline import SOC_KEY, NuisanceBlock, PreparedPipeline, StatKey
from .regimes import Regime

BOOTSTRAP = "bootstrap-percentile"
SANDWICH = "sandwich-wald"
CI_METHODS = {"bootstrap": BOOTSTRAP, "sandwich": SANDWICH,
              BOOTSTRAP: BOOTSTRAP, SANDWICH: SANDWICH}


def ci_method(name: str) -> str:
    """Canonical method id for ``bootstrap``/``sandwich`` or their full names."""
    try:
        return CI_METHODS[name]
    except KeyError:
        raise ValueError(f"unknown CI method {name!r}; use bootstrap or sandwich") from None
MAX_FAILED_FRACTION = 0.20
SINGULAR_COND = 1e14


class BootstrapError(RuntimeError):
    pass


class SandwichError(RuntimeError):
    def __init__(self, message: str, condition: float):
        super().__init__(f"{message} (condition number {condition:.3g})")
        self.condition = condition


@dataclass(frozen=True)
class ConfidenceInterval:
    lower: float
    upper: float
    level: float = 0.95
    method: str = BOOTSTRAP
    replicates: int | None = None
    failed: int | None = None
    se: float | None = None
    bread_cond: float | None = None
    meat_cond: float | None = None

    def __post_init__(self):
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must lie in (0, 1)")
        if self.lower > self.upper:
            raise ValueError("lower bound exceeds upper bound")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def contains(self, x: float) -> bool:
        return self.lower <= x <= self.upper

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


def _entropy(seed) -> list[int]:
    if isinstance(seed, (list, tuple)):
        return [int(s) for s in seed]
    return [int(seed)]


# -- bootstrap ---------------------------------------------------------------------

def _boot_chunk(target, entropy: list[int], indices: Sequence[int], n: int,
                keys: Sequence) -> np.ndarray:
    out = np.full((len(indices), len(keys)), np.nan)
    for row, b in enumerate(indices):
        rng = np.random.default_rng(entropy + [b])
        idx = rng.integers(0, n, n)
        try:
            if isinstance(target, PreparedPipeline):
                stats = target.run(target.weights_from_indices(idx))
            else:
                ds, fn = target
                stats = fn(ds.take(idx))
        except Exception:
            continue
        out[row] = [stats.get(k, np.nan) for k in keys]
    return out


def bootstrap_replicates(ds: Dataset, pipeline, B: int = 500, seed=0, workers: int = 1,
                         prepared: PreparedPipeline | None = None) -> tuple[list, np.ndarray, dict]:
    """Raw replicate statistics, shape (B, n_stats).

    Replicate ``b`` resamples whole rows with the generator seeded by
    ``(seed..., b)``, so results do not depend on ``workers``. ``pipeline``
    is either an object with ``prepare(ds)`` (an EstimationPipeline) or a
    callable ``ds -> {key: value}``.
    """
    if B < 1:
        raise ValueError("B must be positive")
    if prepared is None and hasattr(pipeline, "prepare"):
        prepared = pipeline.prepare(ds)
    if prepared is not None:
        point = prepared.run()
        target: Any = prepared
    else:
        point = pipeline(ds)
        target = (ds, pipeline)
    keys = list(point)
    entropy = _entropy(seed)
    if workers <= 1:
        reps = _boot_chunk(target, entropy, range(B), ds.n, keys)
    else:
        chunks = [list(c) for c in np.array_split(np.arange(B), workers) if c.size]
        with ProcessPoolExecutor(workers) as pool:
            parts = pool.map(_boot_chunk, [target] * len(chunks), [entropy] * len(chunks),
                             chunks, [ds.n] * len(chunks), [keys] * len(chunks))
            reps = np.vstack(list(parts))
    return keys, reps, point


def percentile_interval(values: np.ndarray, level: float = 0.95) -> tuple[float, float]:
    a = (1.0 - level) / 2.0
    lo, hi = np.quantile(values, [a, 1.0 - a])
    return float(lo), float(hi)


def bootstrap_ci(ds: Dataset, pipeline, B: int = 500, seed=0, level: float = 0.95,
                 workers: int = 1, strict: bool = True,
                 prepared: PreparedPipeline | None = None) -> dict[Any, ConfidenceInterval]:
    """Percentile intervals for every statistic the pipeline produces.

    Failed replicates are dropped per statistic and counted. More than 20%
    failures raises ``BootstrapError`` when ``strict``; otherwise the
    affected statistic is omitted from the result.
    """
    keys, reps, point = bootstrap_replicates(ds, pipeline, B, seed, workers, prepared)
    out = {}
    for j, key in enumerate(keys):
        col = reps[:, j]
        ok = col[np.isfinite(col)]
        failed = B - ok.size
        if failed > MAX_FAILED_FRACTION * B or ok.size == 0:
            if strict:
                raise BootstrapError(f"bootstrap unstable: {failed} of {B} replicates failed "
                                     f"for {getattr(key, 'label', lambda: key)()}")
            continue
        lo, hi = percentile_interval(ok, level)
        out[key] = ConfidenceInterval(lo, hi, level, BOOTSTRAP, int(ok.size), int(failed),
                                      se=float(np.std(ok, ddof=1)) if ok.size > 1 else 0.0)
    return out


# -- sandwich ------------------------------------------------------------------------

@dataclass(frozen=True)
class StackedResult:
    theta: np.ndarray        # targets followed by contrasts
    cov: np.ndarray          # covariance of theta
    bread_cond: float
    meat_cond: float

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.cov), 0.0))


def _numeric_jacobian(fn: Callable, betas: list, b: int, w: np.ndarray) -> np.ndarray:
    """d/d beta_b of the weighted mean of fn(betas), central differences."""
    beta = betas[b]
    flat = beta.ravel()
    out = np.zeros(flat.size)
    total = w.sum()
    for j in range(flat.size):
        h = 1e-6 * max(1.0, abs(flat[j]))
        plus, minus = flat.copy(), flat.copy()
        plus[j] += h
        minus[j] -= h
        bp = list(betas)
        bp[b] = plus.reshape(beta.shape)
        bm = list(betas)
        bm[b] = minus.reshape(beta.shape)
        out[j] = (np.dot(w, fn(bp)) - np.dot(w, fn(bm))) / (2.0 * h * total)
    return out


def stacked_sandwich(blocks: Sequence[NuisanceBlock],
                     targets: Sequence[tuple[Sequence[int], Callable]],
                     w: np.ndarray | None = None,
                     contrasts: Sequence[tuple[int, int]] = ()) -> StackedResult:
    """Solve-free sandwich for stacked estimating equations.

    Parameters are ``(beta_1, ..., beta_B, mu_1, ..., mu_T, delta_1, ...)``:
    each nuisance block contributes its likelihood score, each target
    ``(block_ids, g)`` the equation ``g(betas) - mu`` and each contrast
    ``(i, j)`` the equation ``mu_i - mu_j - delta``. The nuisance bread
    blocks use the analytic information matrix; target rows are
    differentiated numerically.
    """
    m = blocks[0].X.shape[0] if blocks else None
    if m is None:
        m = targets[0][1]([]).shape[0]
    w = np.ones(m) if w is None else np.asarray(w, dtype=float)
    N = float(w.sum())
    sizes = [blk.beta.size for blk in blocks]
    offs = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    qb = int(offs[-1])
    T, C = len(targets), len(contrasts)
    q = qb + T + C
    betas_all = [blk.beta for blk in blocks]

    psi = np.zeros((m, q))
    A = np.zeros((q, q))
    for i, blk in enumerate(blocks):
        sl = slice(offs[i], offs[i + 1])
        psi[:, sl] = row_scores(blk.family, blk.beta, blk.X, blk.y)
        A[sl, sl] = information(blk.family, blk.beta, blk.X, w) / N
    mu = np.zeros(T)
    for t, (ids, g) in enumerate(targets):
        sub = [betas_all[i] for i in ids]
        vals = g(sub)
        mu[t] = np.dot(w, vals) / N
        psi[:, qb + t] = vals - mu[t]
        A[qb + t, qb + t] = 1.0
        for local, i in enumerate(ids):
            A[qb + t, offs[i]:offs[i + 1]] = -_numeric_jacobian(g, sub, local, w)
    delta = np.zeros(C)
    for c, (i, j) in enumerate(contrasts):
        r = qb + T + c
        delta[c] = mu[i] - mu[j]
        A[r, qb + i] = -1.0
        A[r, qb + j] = 1.0
        A[r, r] = 1.0
    meat = (psi * w[:, None]).T @ psi / N
    cond = float(np.linalg.cond(A))
    if not np.isfinite(cond) or cond > SINGULAR_COND:
        raise SandwichError("singular bread matrix", cond)
    Ainv = np.linalg.inv(A)
    V = Ainv @ meat @ Ainv.T / N
    sel = slice(qb, q)
    meat_t = meat[sel, sel][:T, :T]
    meat_cond = float(np.linalg.cond(meat_t)) if T else 1.0
    return StackedResult(np.concatenate([mu, delta]), V[sel, sel], cond, meat_cond)


def _wald(est: float, se: float, level: float, cond: float, meat_cond: float) -> ConfidenceInterval:
    z = float(norm.ppf(0.5 + level / 2.0))
    return ConfidenceInterval(est - z * se, est + z * se, level, SANDWICH, se=se,
                              bread_cond=cond, meat_cond=meat_cond)


def pipeline_sandwich(prepared: PreparedPipeline, level: float = 0.95,
                      keys: Sequence[StatKey] | None = None) -> dict[StatKey, ConfidenceInterval]:
    """Sandwich intervals for the statistics of a prepared pipeline.

    Statistics whose nuisance fit failed or whose bread is singular are
    omitted.
    """
    point = prepared.point_stats if prepared.point_stats is not None else prepared.run()
    w = prepared.base_weights
    out = {}
    for key in (keys or list(point)):
        if not math.isfinite(point.get(key, math.nan)):
            continue
        try:
            if key.kind == "value":
                parts = [(key.estimator, key.a)]
                contrasts = []
            else:
                b = (SOC, "SOC") if key.b == "SOC" else (key.estimator, key.b)
                parts = [(key.estimator, key.a), b]
                contrasts = [(0, 1)]
            res = _stack_parts(prepared, parts, contrasts, w)
        except (SandwichError, KeyError, np.linalg.LinAlgError, EstimationError):
            continue
        idx = len(parts) if contrasts else 0
        est = float(res.theta[idx])
        out[key] = _wald(est, float(res.se[idx]), level, res.bread_cond, res.meat_cond)
    return out


def _stack_parts(prepared, parts, contrasts, w) -> StackedResult:
    block_keys: list = []
    blocks: list = []
    targets = []
    for est, rid in parts:
        keys, blks, g = prepared.value_equations(est, rid)
        ids = []
        for k, blk in zip(keys, blks):
            if k not in block_keys:
                block_keys.append(k)
                blocks.append(blk)
            ids.append(block_keys.index(k))
        targets.append((ids, g))
    return stacked_sandwich(blocks, targets, w, contrasts)


def sandwich_ci(ds: Dataset, estimator: str, model: FittedModel | None = None,
                regime: Regime | None = None, level: float = 0.95) -> ConfidenceInterval:
    """Wald interval for one value estimate from its stacked estimating equations.

    ``model`` is the fitted nuisance model matching ``estimator`` (multinomial
    propensity for ipw_nb, logistic concordance propensity for ipw_b, outcome
    model with CONC for gc_b, with T for gc_nb); none for soc_mean.
    """
    y = ds.y
    if estimator == SOC:
        res = stacked_sandwich([], [([], lambda betas: y.copy())])
        return _wald(float(res.theta[0]), float(res.se[0]), level, res.bread_cond, res.meat_cond)
    if model is None or regime is None or model.spec is None:
        raise EstimationError(f"{estimator} needs a fitted model with a design and a regime")
    f = regime.assign(ds)
    conc = f == ds.t
    X = build_design(ds, model.spec, regime).matrix[:, model.kept]
    if estimator == IPW_NB:
        if model.family != MULTINOMIAL:
            raise EstimationError("ipw_nb needs a multinomial propensity model")
        blk = NuisanceBlock(MULTINOMIAL, X, ds.t, model.coef)

        def g(betas):
            eta = np.hstack([np.zeros((ds.n, 1)), X @ betas[0].T])
            P = np.exp(eta - eta.max(axis=1, keepdims=True))
            P /= P.sum(axis=1, keepdims=True)
            out = np.zeros(ds.n)
            out[conc] = y[conc] / P[np.arange(ds.n), ds.t][conc]
            return out
    elif estimator == IPW_B:
        if model.family != LOGISTIC:
            raise EstimationError("ipw_b needs a logistic propensity model")
        blk = NuisanceBlock(LOGISTIC, X, conc.astype(float), model.coef)

        def g(betas):
            p = 1.0 / (1.0 + np.exp(-(X @ betas[0])))
            out = np.zeros(ds.n)
            out[conc] = y[conc] / p[conc]
            return out
    elif estimator in (GC_B, GC_NB):
        blk = NuisanceBlock(model.family, X, y, model.coef)
        if estimator == GC_B:
            Xp = build_design(ds, model.spec, regime, concordant=np.ones(ds.n)).matrix
        else:
            Xp = build_design(ds, model.spec, regime, treatment=f).matrix
        Xp = Xp[:, model.kept]
        if model.family == LOGISTIC:
            def g(betas):
                return 1.0 / (1.0 + np.exp(-(Xp @ betas[0])))
        else:
            def g(betas):
                return Xp @ betas[0]
    else:
        raise EstimationError(f"unknown estimator {estimator!r}")
    res = stacked_sandwich([blk], [([0], g)])
    return _wald(float(res.theta[0]), float(res.se[0]), level, res.bread_cond, res.meat_cond)
