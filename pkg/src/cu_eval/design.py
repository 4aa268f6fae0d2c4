"""Declarative regression designs and design-matrix construction.

A design is written as a small formula, e.g. ``"T + T:N(z1) + N(z2)"``:

* terms are joined by ``+``; factors inside a term by ``:``
* ``1`` is the intercept (never implicit), ``0`` is accepted and ignored
* ``C(col)`` forces a categorical view, ``N(col)`` a numeric view; a bare
  column name uses its declared type
* ``T`` is the treatment (categorical) and ``CONC`` the regime-concordance
  indicator ``1[f(z) = t]``

Categorical factors expand to one indicator per declared level (``full``
coding) or per level except the first (``reference`` coding).
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .data import CATEGORICAL, Dataset, Schema, format_label

if TYPE_CHECKING:
    from .regimes import Regime

TREATMENT = "T"
CONCORDANCE = "CONC"
_FACTOR_RE = re.compile(r"^(?:(C|N)\(\s*([^()\s]+)\s*\)|([^()\s:+]+))$")


class DesignError(ValueError):
    pass


@dataclass(frozen=True)
class Factor:
    kind: str  # "cat", "num", "treat", "conc"
    column: str | None = None

    def __str__(self) -> str:
        if self.kind == "treat":
            return TREATMENT
        if self.kind == "conc":
            return CONCORDANCE
        return f"{'C' if self.kind == 'cat' else 'N'}({self.column})"


@dataclass(frozen=True)
class Term:
    """Product of factors; the empty product is the intercept."""

    factors: tuple[Factor, ...] = ()

    @property
    def is_intercept(self) -> bool:
        return not self.factors

    def __str__(self) -> str:
        return "1" if self.is_intercept else ":".join(str(f) for f in self.factors)


def _parse_factor(text: str, schema: Schema | None) -> Factor:
    m = _FACTOR_RE.match(text.strip())
    if not m:
        raise DesignError(f"cannot parse factor {text!r}")
    fn, inner, bare = m.groups()
    if bare is not None:
        if bare == TREATMENT:
            return Factor("treat")
        if bare == CONCORDANCE:
            return Factor("conc")
        if schema is not None and bare == schema.treatment:
            return Factor("treat")
        if schema is None:
            return Factor("auto", bare)
        try:
            col = schema.column(bare)
        except KeyError:
            raise DesignError(f"term references unknown column {bare!r}") from None
        return Factor("cat" if col.kind == CATEGORICAL else "num", bare)
    return Factor("cat" if fn == "C" else "num", inner)


@dataclass(frozen=True)
class DesignSpec:
    terms: tuple[Term, ...]
    coding: str = "full"

    def __post_init__(self):
        if self.coding not in ("full", "reference"):
            raise DesignError(f"unknown coding {self.coding!r}")
        object.__setattr__(self, "terms", tuple(self.terms))

    @classmethod
    def parse(cls, formula: str, coding: str = "full", schema: Schema | None = None) -> "DesignSpec":
        terms = []
        for chunk in formula.split("+"):
            chunk = chunk.strip()
            if chunk in ("0", "-1"):
                continue
            if not chunk:
                raise DesignError(f"empty term in {formula!r}")
            if chunk == "1":
                terms.append(Term())
                continue
            terms.append(Term(tuple(_parse_factor(f, schema) for f in chunk.split(":"))))
        if not terms:
            raise DesignError("design has no terms")
        return cls(tuple(terms), coding)

    def __str__(self) -> str:
        return " + ".join(str(t) for t in self.terms)

    @property
    def uses_treatment(self) -> bool:
        return any(f.kind == "treat" for t in self.terms for f in t.factors)

    @property
    def uses_concordance(self) -> bool:
        return any(f.kind == "conc" for t in self.terms for f in t.factors)

    @property
    def has_intercept(self) -> bool:
        return any(t.is_intercept for t in self.terms)

    def to_dict(self) -> dict:
        return {"formula": str(self), "coding": self.coding}

    @classmethod
    def from_dict(cls, d: dict) -> "DesignSpec":
        return cls.parse(d["formula"], d.get("coding", "full"))


def saturated(columns: tuple[str, ...] | list[str], concordance: bool = False) -> DesignSpec:
    """One indicator per joint cell of ``columns`` (optionally also per cell x CONC)."""
    cells = ":".join(f"C({c})" for c in columns)
    formula = cells + (f" + {cells}:{CONCORDANCE}" if concordance else "")
    return DesignSpec.parse(formula, "full")


@dataclass(frozen=True, eq=False)
class Design:
    matrix: np.ndarray
    names: tuple[str, ...]

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape


def _factor_block(ds: Dataset, factor: Factor, coding: str,
                  t_codes: np.ndarray, conc: np.ndarray | None) -> tuple[np.ndarray, list[str]]:
    schema = ds.schema
    if factor.kind == "conc":
        if conc is None:
            raise DesignError("design uses CONC but no regime or concordance values were given")
        return conc.reshape(-1, 1), [CONCORDANCE]
    if factor.kind == "treat":
        codes, levels, name = t_codes, schema.treatment_levels, TREATMENT
    else:
        col_name = factor.column
        if col_name == schema.outcome:
            raise DesignError(f"term references the outcome column {col_name!r}")
        try:
            col = schema.column(col_name)
        except KeyError:
            raise DesignError(f"term references unknown column {col_name!r}") from None
        kind = factor.kind
        if kind == "auto":
            kind = "cat" if col.kind == CATEGORICAL else "num"
        if col_name == schema.treatment:
            if kind == "num":
                if not col.numeric_levels:
                    raise DesignError(f"column {col_name!r} has non-numeric levels")
                return np.asarray(col.levels, dtype=float)[t_codes][:, None], [col_name]
            codes, levels, name = t_codes, col.levels, col_name
        elif kind == "num":
            try:
                return ds.numeric(col_name)[:, None], [col_name]
            except TypeError as e:
                raise DesignError(str(e)) from None
        else:
            if col.kind != CATEGORICAL:
                raise DesignError(f"column {col_name!r} is not categorical")
            codes, levels, name = ds.codes(col_name), col.levels, col_name
    start = 1 if coding == "reference" else 0
    idx = np.arange(start, len(levels))
    block = (codes[:, None] == idx[None, :]).astype(float)
    return block, [f"{name}[{format_label(levels[i])}]" for i in idx]


def build_design(ds: Dataset, spec: DesignSpec, regime: "Regime | None" = None, *,
                 treatment: np.ndarray | None = None,
                 concordant: np.ndarray | None = None) -> Design:
    """Encode ``ds`` under ``spec`` into an n x p float matrix.

    ``treatment`` overrides the observed treatment codes (used to predict
    under a regime); ``concordant`` overrides the concordance indicator,
    which otherwise is ``regime(z_i) == t_i``.
    """
    t_codes = ds.t if treatment is None else np.asarray(treatment, dtype=np.int64)
    conc = None
    if concordant is not None:
        conc = np.asarray(concordant, dtype=float)
        if conc.shape != (ds.n,):
            raise DesignError("concordance vector has wrong length")
    elif spec.uses_concordance:
        if regime is None:
            raise DesignError("design uses CONC but no regime was supplied")
        conc = (regime.assign(ds) == ds.t).astype(float)
    blocks = []
    names: list[str] = []
    ones = np.ones((ds.n, 1))
    for term in spec.terms:
        mat, nm = ones, [""]
        for factor in term.factors:
            b, bn = _factor_block(ds, factor, spec.coding, t_codes, conc)
            mat = (mat[:, :, None] * b[:, None, :]).reshape(ds.n, -1)
            nm = [f"{a}:{c}" if a else c for a in nm for c in bn]
        blocks.append(mat)
        names.extend(nm if not term.is_intercept else ["(Intercept)"])
    matrix = np.ascontiguousarray(np.hstack(blocks))
    matrix.setflags(write=False)
    return Design(matrix, tuple(names))
