"""Linear, logistic and multinomial (softmax) regression.

All fitters accept optional frequency weights; a row with weight ``w`` counts
as ``w`` identical observations. Logistic and multinomial models are fitted
by Newton's method with step halving, so the log-likelihood never decreases
between iterations beyond floating-point rounding.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.special import expit

from .design import DesignSpec

LINEAR = "linear"
LOGISTIC = "logistic"
MULTINOMIAL = "multinomial"
FAMILIES = (LINEAR, LOGISTIC, MULTINOMIAL)

GRAD_TOL = 1e-8
MAX_ITER = 100
SEPARATION_BOUND = 15.0
_COLLINEAR_RTOL = 1e-9


class GLMError(ValueError):
    pass


class CollinearityError(GLMError):
    pass


class CollinearityWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ConvergenceReport:
    converged: bool
    iterations: int
    grad_norm: float
    loglik: float
    separated: bool = False
    loglik_path: tuple[float, ...] = field(default=(), repr=False)

    def to_dict(self) -> dict:
        return {"converged": self.converged, "iterations": self.iterations,
                "grad_norm": self.grad_norm, "loglik": self.loglik,
                "separated": self.separated}


@dataclass(frozen=True, eq=False)
class FittedModel:
    """A fitted regression.

    ``coef`` covers retained columns only: shape ``(p_kept,)`` for linear and
    logistic models, ``(k - 1, p_kept)`` for multinomial models whose first
    level is the reference. ``kept`` masks the retained columns of the full
    design of width ``len(names)``.
    """

    family: str
    coef: np.ndarray
    kept: np.ndarray
    names: tuple[str, ...]
    report: ConvergenceReport
    spec: DesignSpec | None = None
    levels: tuple | None = None

    @property
    def width(self) -> int:
        return int(self.kept.shape[0])

    @property
    def dropped(self) -> tuple[str, ...]:
        return tuple(nm for nm, k in zip(self.names, self.kept) if not k)

    @property
    def n_params(self) -> int:
        return int(self.coef.size)

    @property
    def converged(self) -> bool:
        return self.report.converged

    def full_coef(self) -> np.ndarray:
        """Coefficients over the full design width, zero for dropped columns."""
        if self.family == MULTINOMIAL:
            out = np.zeros((self.coef.shape[0], self.width))
            out[:, self.kept] = self.coef
        else:
            out = np.zeros(self.width)
            out[self.kept] = self.coef
        return out

    def to_dict(self) -> dict:
        d: dict[str, Any] = {
            "family": self.family,
            "terms": list(self.names),
            "kept": [bool(k) for k in self.kept],
            "coefficients": self.full_coef().tolist(),
            "convergence": self.report.to_dict(),
        }
        if self.spec is not None:
            d["design"] = self.spec.to_dict()
        if self.levels is not None:
            d["levels"] = list(self.levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FittedModel":
        kept = np.asarray(d["kept"], dtype=bool)
        full = np.asarray(d["coefficients"], dtype=float)
        coef = full[:, kept] if d["family"] == MULTINOMIAL else full[kept]
        rep = d["convergence"]
        report = ConvergenceReport(rep["converged"], rep["iterations"], rep["grad_norm"],
                                   rep["loglik"], rep.get("separated", False))
        spec = DesignSpec.from_dict(d["design"]) if "design" in d else None
        levels = tuple(d["levels"]) if "levels" in d else None
        return cls(d["family"], coef, kept, tuple(d["terms"]), report, spec, levels)


# -- likelihood pieces -------------------------------------------------------

def _eta_multi(beta: np.ndarray, X: np.ndarray) -> np.ndarray:
    eta = X @ beta.T
    return np.hstack([np.zeros((X.shape[0], 1)), eta])


def loglik(family: str, beta: np.ndarray, X: np.ndarray, y: np.ndarray,
           w: np.ndarray | None = None) -> float:
    """Log-likelihood (for linear models: minus half the residual sum of squares)."""
    w = np.ones(X.shape[0]) if w is None else w
    if family == LINEAR:
        r = y - X @ beta
        return float(-0.5 * np.dot(w, r * r))
    if family == LOGISTIC:
        eta = X @ beta
        return float(np.dot(w, y * eta - np.logaddexp(0.0, eta)))
    if family == MULTINOMIAL:
        eta = _eta_multi(beta, X)
        y = np.asarray(y, dtype=np.int64)
        picked = eta[np.arange(X.shape[0]), y]
        m = eta.max(axis=1)
        lse = m + np.log(np.exp(eta - m[:, None]).sum(axis=1))
        return float(np.dot(w, picked - lse))
    raise GLMError(f"unknown family {family!r}")


def row_scores(family: str, beta: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-row gradient of the log-likelihood, shape (n, n_params).

    Multinomial parameters are flattened level-major, matching ``beta.ravel()``.
    """
    if family == LINEAR:
        return X * (y - X @ beta)[:, None]
    if family == LOGISTIC:
        return X * (y - expit(X @ beta))[:, None]
    if family == MULTINOMIAL:
        P = _softmax(_eta_multi(beta, X))
        k = P.shape[1]
        Y = np.asarray(y, dtype=np.int64)[:, None] == np.arange(k)[None, :]
        R = Y[:, 1:] - P[:, 1:]
        return (R[:, :, None] * X[:, None, :]).reshape(X.shape[0], -1)
    raise GLMError(f"unknown family {family!r}")


def score(family: str, beta: np.ndarray, X: np.ndarray, y: np.ndarray,
          w: np.ndarray | None = None) -> np.ndarray:
    w = np.ones(X.shape[0]) if w is None else w
    g = w @ row_scores(family, beta, X, y)
    return g.reshape(np.shape(beta))


def information(family: str, beta: np.ndarray, X: np.ndarray,
                w: np.ndarray | None = None) -> np.ndarray:
    """Negative Hessian of the (weighted) log-likelihood in flattened parameters."""
    w = np.ones(X.shape[0]) if w is None else w
    if family == LINEAR:
        return (X * w[:, None]).T @ X
    if family == LOGISTIC:
        p = expit(X @ beta)
        return (X * (w * p * (1.0 - p))[:, None]).T @ X
    if family == MULTINOMIAL:
        P = _softmax(_eta_multi(beta, X))[:, 1:]
        km1, p = P.shape[1], X.shape[1]
        # block (j, l) is X' diag(w P_j (delta_jl - P_l)) X
        H = np.empty((km1 * p, km1 * p))
        for j in range(km1):
            for l in range(j, km1):
                c = w * P[:, j] * ((j == l) - P[:, l])
                blk = (X * c[:, None]).T @ X
                H[j * p:(j + 1) * p, l * p:(l + 1) * p] = blk
                H[l * p:(l + 1) * p, j * p:(j + 1) * p] = blk.T
        return H
    raise GLMError(f"unknown family {family!r}")


def _softmax(eta: np.ndarray) -> np.ndarray:
    eta = eta - eta.max(axis=1, keepdims=True)
    e = np.exp(eta)
    return e / e.sum(axis=1, keepdims=True)


# -- column pruning ------------------------------------------------------------

def _retained_columns(X: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Mask of columns that are not linear combinations of earlier columns."""
    rows = w > 0
    A = X[rows] * np.sqrt(w[rows])[:, None]
    p = X.shape[1]
    if A.shape[0] == 0:
        return np.zeros(p, dtype=bool)
    scale = np.sqrt((A * A).sum(axis=0))
    keep = scale > 0
    if not keep.any():
        return keep
    An = A[:, keep] / scale[keep]
    if An.shape[0] < An.shape[1]:
        An = np.vstack([An, np.zeros((An.shape[1] - An.shape[0], An.shape[1]))])
    r = np.abs(np.diag(np.linalg.qr(An, mode="r")))
    sub = np.zeros(keep.sum(), dtype=bool)
    # a dependent column leaves a tiny diagonal entry in the triangular factor
    sub[:] = r > _COLLINEAR_RTOL * max(1.0, r.max())
    keep[np.flatnonzero(keep)] = sub
    return keep


def _prepare(X, w, names, on_collinear):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise GLMError("design must be a 2-d matrix")
    n, p = X.shape
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    if w.shape != (n,) or np.any(w < 0):
        raise GLMError("weights must be non-negative with one entry per row")
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(p))
    if len(names) != p:
        raise GLMError("names do not match design width")
    kept = _retained_columns(X, w)
    if not kept.all():
        dropped = [nm for nm, k in zip(names, kept) if not k]
        msg = f"dropped collinear column(s): {', '.join(dropped)}"
        if on_collinear == "raise":
            raise CollinearityError(msg)
        if on_collinear == "warn":
            warnings.warn(msg, CollinearityWarning, stacklevel=3)
    if not kept.any():
        raise CollinearityError("no estimable columns remain after pruning")
    if w.sum() < kept.sum():
        raise CollinearityError(
            f"rank-deficient design: {w.sum():g} rows for {int(kept.sum())} columns; "
            f"dropped: {', '.join(nm for nm, k in zip(names, kept) if not k) or 'none'}")
    return X, w, names, kept


def _start(start, kept, shape):
    if start is None:
        return np.zeros(shape)
    s = np.asarray(start, dtype=float)
    if s.ndim == 2:
        s = s[:, kept] if s.shape[1] == kept.shape[0] else s
    elif s.shape[0] == kept.shape[0]:
        s = s[kept]
    if s.shape != shape:
        return np.zeros(shape)
    return s.copy()


# -- fitters -----------------------------------------------------------------------

def fit_linear(X, y, weights=None, *, names: Sequence[str] | None = None,
               spec: DesignSpec | None = None, on_collinear: str = "warn") -> FittedModel:
    """Weighted least squares via QR on the retained columns."""
    X, w, names, kept = _prepare(X, weights, names, on_collinear)
    y = np.asarray(y, dtype=float)
    sw = np.sqrt(w)
    Xk = X[:, kept]
    q, r = np.linalg.qr(Xk * sw[:, None])
    beta = np.linalg.solve(r, q.T @ (y * sw))
    g = score(LINEAR, beta, Xk, y, w)
    gn = float(np.max(np.abs(g)))
    report = ConvergenceReport(True, 1, gn, loglik(LINEAR, beta, Xk, y, w))
    return FittedModel(LINEAR, beta, kept, names, report, spec)


def _newton(family, X, y, w, beta, tol, max_iter):
    shape = beta.shape
    ll = loglik(family, beta, X, y, w)
    path = [ll]
    gn = np.inf
    it = 0
    stalled = False
    polished = False
    for it in range(1, max_iter + 1):
        g = score(family, beta, X, y, w).ravel()
        gn = float(np.max(np.abs(g)))
        if gn < tol:
            if polished:
                it -= 1
                break
            # one more step: convergence is quadratic, so this reaches rounding level
            polished = True
        H = information(family, beta, X, w)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        t = 1.0
        slack = 1e-12 * max(1.0, abs(ll))  # rounding noise near the optimum
        while True:
            cand = beta + t * step.reshape(shape)
            ll_new = loglik(family, cand, X, y, w)
            if ll_new >= ll - slack:
                break
            t *= 0.5
            if t < 1e-12:
                stalled = True
                break
        if stalled:
            break
        beta, ll = cand, ll_new
        path.append(ll)
    else:
        g = score(family, beta, X, y, w).ravel()
        gn = float(np.max(np.abs(g)))
    return beta, ll, gn, it, tuple(path)


def _glm_report(beta, ll, gn, it, path, X, tol):
    big = float(np.max(np.abs(beta))) > SEPARATION_BOUND if beta.size else False
    separated = bool(big)
    return ConvergenceReport(bool(gn < tol and not separated), it, gn, ll, separated, path)


def fit_logistic(X, y, weights=None, *, names: Sequence[str] | None = None,
                 spec: DesignSpec | None = None, start=None, tol: float = GRAD_TOL,
                 max_iter: int = MAX_ITER, on_collinear: str = "warn") -> FittedModel:
    """Bernoulli maximum likelihood by Newton iterations with step halving.

    Complete or quasi-complete separation is reported through
    ``report.separated`` (and ``converged=False``) rather than raised.
    """
    X, w, names, kept = _prepare(X, weights, names, on_collinear)
    y = np.asarray(y, dtype=float)
    if not np.all((y == 0) | (y == 1)):
        raise GLMError("logistic outcome must be 0/1")
    Xk = X[:, kept]
    beta = _start(start, kept, (Xk.shape[1],))
    beta, ll, gn, it, path = _newton(LOGISTIC, Xk, y, w, beta, tol, max_iter)
    report = _glm_report(beta, ll, gn, it, path, Xk, tol)
    return FittedModel(LOGISTIC, beta, kept, names, report, spec)


def fit_multinomial(X, t, k: int | None = None, weights=None, *, levels: Sequence | None = None,
                    names: Sequence[str] | None = None, spec: DesignSpec | None = None,
                    start=None, tol: float = GRAD_TOL, max_iter: int = MAX_ITER,
                    on_collinear: str = "warn") -> FittedModel:
    """Softmax regression of integer codes ``t`` in ``0..k-1``; code 0 is the reference."""
    X, w, names, kept = _prepare(X, weights, names, on_collinear)
    t = np.asarray(t, dtype=np.int64)
    if k is None:
        k = len(levels) if levels is not None else int(t.max()) + 1
    if k < 2:
        raise GLMError("multinomial model needs at least 2 levels")
    if t.min() < 0 or t.max() >= k:
        raise GLMError("treatment codes out of range")
    counts = np.bincount(t, weights=w, minlength=k)
    absent = [i for i in range(k) if counts[i] <= 0]
    if absent:
        lab = [levels[i] if levels is not None else i for i in absent]
        raise GLMError(f"level(s) absent from data: {lab}")
    Xk = X[:, kept]
    beta = _start(start, kept, (k - 1, Xk.shape[1]))
    beta, ll, gn, it, path = _newton(MULTINOMIAL, Xk, t, w, beta, tol, max_iter)
    report = _glm_report(beta, ll, gn, it, path, Xk, tol)
    return FittedModel(MULTINOMIAL, beta, kept, names, report, spec,
                       tuple(levels) if levels is not None else tuple(range(k)))


def predict(model: FittedModel, X) -> np.ndarray:
    """Mean predictions; per-level probabilities (m x k) for multinomial models."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.width:
        raise GLMError(f"design width {X.shape[-1]} does not match model width {model.width}")
    Xk = X[:, model.kept]
    if model.family == LINEAR:
        return Xk @ model.coef
    if model.family == LOGISTIC:
        return expit(Xk @ model.coef)
    return _softmax(_eta_multi(model.coef, Xk))
