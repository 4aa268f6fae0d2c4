"""Deterministic treatment regimes: static, rule lists, lookup tables, learned."""
from __future__ import annotations

import json
import operator
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .data import CATEGORICAL, CellIndex, Dataset, Schema, _same_label, format_label


class RegimeError(ValueError):
    pass


class RuleSyntaxError(RegimeError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


def _literal(token: str) -> Any:
    if len(token) >= 2 and token[0] == token[-1] and token[0] in "\"'":
        return token[1:-1]
    try:
        return float(token)
    except ValueError:
        return token


class Regime:
    """Base class. ``assign`` returns treatment codes aligned with ``ds`` rows."""

    kind = "abstract"

    def __init__(self, id: str):
        self.id = id

    def assign(self, ds: Dataset) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.id!r}>"


class StaticRegime(Regime):
    kind = "static"

    def __init__(self, label: Any, id: str | None = None):
        super().__init__(id or f"static-{format_label(label)}")
        self.label = label

    def assign(self, ds):
        return np.full(ds.n, ds.schema.treatment_code(self.label), dtype=np.int64)

    def to_dict(self):
        return {"id": self.id, "kind": self.kind, "label": self.label}


_OPS = {"<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge,
        "==": operator.eq, "!=": operator.ne}


@dataclass(frozen=True)
class Condition:
    column: str
    op: str
    value: Any

    def mask(self, ds: Dataset) -> np.ndarray:
        schema = ds.schema
        try:
            col = schema.column(self.column)
        except KeyError:
            raise RegimeError(f"rule references unknown column {self.column!r}") from None
        if self.column == schema.outcome:
            raise RegimeError("rules may not reference the outcome")
        fn = _OPS[self.op]
        if col.kind == CATEGORICAL and not (col.numeric_levels and isinstance(self.value, float)):
            if self.op not in ("==", "!="):
                raise RegimeError(f"ordering comparison on non-numeric column {self.column!r}")
            hits = np.array([_same_label(lv, self.value) for lv in col.levels])
            codes = ds.codes(self.column)
            return hits[codes] if self.op == "==" else ~hits[codes]
        if isinstance(self.value, str):
            raise RegimeError(f"column {self.column!r} compared with non-numeric {self.value!r}")
        return fn(ds.numeric(self.column), self.value)

    def __str__(self):
        v = self.value
        v = format_label(v) if not isinstance(v, str) or re.fullmatch(r"\w+", v) else f'"{v}"'
        return f"{self.column} {self.op} {v}"


@dataclass(frozen=True)
class Rule:
    conditions: tuple[Condition, ...]
    label: Any


class RuleRegime(Regime):
    """Ordered IF/THEN rules with a mandatory ELSE; the first matching rule wins."""

    kind = "rule-list"

    def __init__(self, rules: Sequence[Rule], default: Any, id: str = "rules"):
        super().__init__(id)
        self.rules = tuple(rules)
        self.default = default

    def assign(self, ds):
        out = np.full(ds.n, ds.schema.treatment_code(self.default), dtype=np.int64)
        undecided = np.ones(ds.n, dtype=bool)
        for rule in self.rules:
            m = undecided.copy()
            for cond in rule.conditions:
                m &= cond.mask(ds)
            out[m] = ds.schema.treatment_code(rule.label)
            undecided &= ~m
        return out

    def source(self) -> str:
        lines = [f"IF {' AND '.join(str(c) for c in r.conditions)} THEN {format_label(r.label)}"
                 for r in self.rules]
        lines.append(f"ELSE {format_label(self.default)}")
        return "\n".join(lines) + "\n"

    def to_dict(self):
        return {"id": self.id, "kind": self.kind, "source": self.source()}


_TOKEN_RE = re.compile(r"\s*(<=|>=|==|!=|<|>|\"[^\"]*\"|'[^']*'|[^\s<>=!]+)")


def _tokenize(line: str, lineno: int) -> list[tuple[str, int]]:
    tokens = []
    pos = 0
    stripped = line.rstrip()
    while pos < len(stripped):
        m = _TOKEN_RE.match(stripped, pos)
        if not m or m.end() == pos:
            raise RuleSyntaxError(f"unexpected character {stripped[pos]!r}", lineno, pos + 1)
        tokens.append((m.group(1), m.start(1) + 1))
        pos = m.end()
    return tokens


def parse_rule_dsl(text: str, id: str = "rules") -> RuleRegime:
    """Parse ``IF col op literal [AND ...] THEN label`` lines closed by ``ELSE label``.

    Blank lines and ``#`` comments are ignored.
    """
    rules: list[Rule] = []
    default = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        toks = _tokenize(line, lineno)
        head, col0 = toks[0]
        if default is not None:
            raise RuleSyntaxError("statement after ELSE", lineno, col0)
        if head.upper() == "ELSE":
            if len(toks) != 2:
                raise RuleSyntaxError("ELSE takes exactly one label", lineno,
                                      toks[2][1] if len(toks) > 2 else len(line) + 1)
            default = _literal(toks[1][0])
            continue
        if head.upper() != "IF":
            raise RuleSyntaxError(f"expected IF or ELSE, found {head!r}", lineno, col0)
        conds = []
        i = 1
        while True:
            if i + 3 > len(toks):
                raise RuleSyntaxError("incomplete condition", lineno, len(line.rstrip()) + 1)
            (c, cpos), (op, opos), (lit, _) = toks[i:i + 3]
            if op not in _OPS:
                raise RuleSyntaxError(f"unknown operator {op!r}", lineno, opos)
            if c.upper() in ("AND", "THEN", "IF", "ELSE"):
                raise RuleSyntaxError("expected a column name", lineno, cpos)
            conds.append(Condition(c, op, _literal(lit)))
            i += 3
            if i >= len(toks):
                raise RuleSyntaxError("missing THEN", lineno, len(line.rstrip()) + 1)
            kw, kpos = toks[i]
            if kw.upper() == "AND":
                i += 1
                continue
            if kw.upper() != "THEN":
                raise RuleSyntaxError(f"expected AND or THEN, found {kw!r}", lineno, kpos)
            if len(toks) != i + 2:
                raise RuleSyntaxError("THEN takes exactly one label", lineno,
                                      toks[i + 2][1] if len(toks) > i + 2 else len(line) + 1)
            rules.append(Rule(tuple(conds), _literal(toks[i + 1][0])))
            break
    if default is None:
        last = len(text.splitlines()) or 1
        raise RuleSyntaxError("missing ELSE clause", last, 1)
    return RuleRegime(rules, default, id)


def guideline_crp(column: str = "crp", threshold: float = 10.0,
                  low: str = "csDMARD", high: str = "biologics") -> RuleRegime:
    """CRP-threshold guideline: ``low`` below ``threshold`` mg/L, else ``high``."""
    return parse_rule_dsl(f"IF {column} < {threshold:g} THEN {low}\nELSE {high}\n", id="f_cgl")


class LookupRegime(Regime):
    """Treatment per joint value of categorical ``columns``."""

    kind = "lookup-table"

    def __init__(self, columns: Sequence[str], table: Mapping[tuple, Any],
                 default: Any = None, id: str = "lookup"):
        super().__init__(id)
        self.columns = tuple(columns)
        self.table = {tuple(k) if isinstance(k, (tuple, list)) else (k,): v
                      for k, v in table.items()}
        self.default = default

    def code_table(self, schema: Schema) -> np.ndarray:
        try:
            index = CellIndex.for_schema(schema, self.columns)
        except KeyError as e:
            raise RegimeError(f"lookup table references unknown column {e.args[0]!r}") from None
        codes = np.full(index.n_cells, -1, dtype=np.int64)
        for key, label in self.table.items():
            try:
                cell_codes = [c.code_of(v) for c, v in zip(index.columns, key)]
            except KeyError as e:
                raise RegimeError(f"lookup key {key!r}: undeclared level {e.args[0]!r}") from None
            codes[index.cell_of_codes(cell_codes)] = schema.treatment_code(label)
        if self.default is not None:
            codes[codes < 0] = schema.treatment_code(self.default)
        return codes

    def assign(self, ds):
        table = self.code_table(ds.schema)
        index = CellIndex.for_schema(ds.schema, self.columns)
        out = table[index.cell_ids(ds)]
        if np.any(out < 0):
            row = int(np.flatnonzero(out < 0)[0])
            raise RegimeError(f"lookup table has no entry for row {row + 1}")
        return out

    def to_dict(self):
        return {"id": self.id, "kind": self.kind, "columns": list(self.columns),
                "table": [[list(k), v] for k, v in self.table.items()],
                "default": self.default}


# -- random Fourier feature regime ---------------------------------------------

def encode_covariates(ds: Dataset, columns: Sequence[str] | None = None) -> tuple[np.ndarray, list[str]]:
    """Numeric encoding: numeric columns as-is, numeric-labelled categoricals by
    value, other categoricals one-hot over their declared levels."""
    schema = ds.schema
    cols = [schema.column(c) for c in columns] if columns else list(schema.covariates)
    blocks, names = [], []
    for c in cols:
        if c.kind != CATEGORICAL or c.numeric_levels:
            blocks.append(ds.numeric(c.name)[:, None])
            names.append(c.name)
        else:
            codes = ds.codes(c.name)
            blocks.append((codes[:, None] == np.arange(len(c.levels))).astype(float))
            names.extend(f"{c.name}[{format_label(v)}]" for v in c.levels)
    if not blocks:
        return np.zeros((ds.n, 0)), []
    return np.hstack(blocks), names


def median_pairwise_distance(X: np.ndarray, max_rows: int = 1000, seed: int = 0) -> float:
    if X.shape[0] > max_rows:
        X = X[np.random.default_rng(seed).choice(X.shape[0], max_rows, replace=False)]
    sq = (X * X).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0)
    iu = np.triu_indices(X.shape[0], k=1)
    med = float(np.median(np.sqrt(d2[iu]))) if iu[0].size else 1.0
    return med if med > 0 else 1.0


@dataclass(frozen=True, eq=False)
class RffScorer:
    """Per-arm ridge regressions on random Fourier features.

    Features are ``sqrt(2/D) * cos(x @ omega.T + phase)`` of standardized
    covariates with ``omega ~ N(0, 1/sigma^2)``, approximating a Gaussian
    kernel of bandwidth ``sigma``.
    """

    columns: tuple[str, ...]
    mean: np.ndarray
    scale: np.ndarray
    omega: np.ndarray
    phase: np.ndarray
    sigma: float
    lam: float
    intercepts: np.ndarray
    coefs: np.ndarray  # (n_arms, D)
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def D(self) -> int:
        return int(self.omega.shape[0])

    def features(self, X: np.ndarray) -> np.ndarray:
        Xs = (X - self.mean) / self.scale
        return np.sqrt(2.0 / self.D) * np.cos(Xs @ self.omega.T + self.phase)

    def predict(self, ds: Dataset) -> np.ndarray:
        X, _ = encode_covariates(ds, self.columns)
        return self.features(X) @ self.coefs.T + self.intercepts


class LearnedRegime(Regime):
    kind = "learned"

    def __init__(self, scorer: RffScorer, arms: Sequence[Any], minimize: bool = True,
                 id: str = "f_rff"):
        super().__init__(id)
        self.scorer = scorer
        self.arms = tuple(arms)
        self.minimize = minimize

    def assign(self, ds):
        pred = self.scorer.predict(ds)
        # argmin/argmax return the first optimum: ties go to the earliest declared arm
        best = np.argmin(pred, axis=1) if self.minimize else np.argmax(pred, axis=1)
        arm_codes = np.array([ds.schema.treatment_code(a) for a in self.arms])
        return arm_codes[best]

    def to_dict(self):
        s = self.scorer
        return {
            "id": self.id, "kind": self.kind, "arms": list(self.arms),
            "direction": "minimize" if self.minimize else "maximize",
            "columns": list(s.columns), "mean": s.mean.tolist(), "scale": s.scale.tolist(),
            "omega": s.omega.tolist(), "phase": s.phase.tolist(), "sigma": s.sigma,
            "lambda": s.lam, "intercepts": s.intercepts.tolist(), "coefs": s.coefs.tolist(),
            "seed": s.seed, "meta": s.meta,
        }


def learn_rff_regime(train: Dataset, D: int = 200, sigma: float | None = None,
                     lam: float = 1.0, seed: int = 0, minimize: bool = True,
                     columns: Sequence[str] | None = None, id: str = "f_rff") -> LearnedRegime:
    """Fit per-arm ridge regressions of y on RFF features and return the
    regime choosing the arm with the best predicted outcome.

    ``sigma=None`` uses the median pairwise distance of the standardized
    training covariates. Each arm keeps an unpenalized intercept, so a very
    large ``lam`` shrinks every arm to its mean outcome.
    """
    if D < 1:
        raise RegimeError("feature count must be positive")
    levels = train.schema.treatment_levels
    counts = np.bincount(train.t, minlength=len(levels))
    for lvl, c in zip(levels, counts):
        if c < 2:
            raise RegimeError(f"arm {format_label(lvl)} has {c} training rows; at least 2 required")
        if c < D / 10:
            raise RegimeError(f"arm {format_label(lvl)} has {c} training rows; "
                              f"at least D/10 = {D / 10:g} required")
    X, names = encode_covariates(train, columns)
    cols = tuple(columns) if columns else tuple(c.name for c in train.schema.covariates)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    Xs = (X - mean) / scale
    sigma_rule = "median-heuristic" if sigma is None else "given"
    if sigma is None:
        sigma = median_pairwise_distance(Xs, seed=seed)
    rng = np.random.default_rng(seed)
    omega = rng.standard_normal((D, X.shape[1])) / sigma
    phase = rng.uniform(0.0, 2.0 * np.pi, D)
    Phi = np.sqrt(2.0 / D) * np.cos(Xs @ omega.T + phase)
    intercepts = np.zeros(len(levels))
    coefs = np.zeros((len(levels), D))
    for a in range(len(levels)):
        rows = train.t == a
        F, y = Phi[rows], train.y[rows]
        fm, ym = F.mean(axis=0), y.mean()
        Fc = F - fm
        coefs[a] = np.linalg.solve(Fc.T @ Fc + lam * np.eye(D), Fc.T @ (y - ym))
        intercepts[a] = ym - fm @ coefs[a]
    scorer = RffScorer(cols, mean, scale, omega, phase, float(sigma), float(lam),
                       intercepts, coefs, seed,
                       {"D": D, "sigma_rule": sigma_rule,
                        "n_train": train.n, "features": names})
    return LearnedRegime(scorer, levels, minimize, id)


# -- helpers ---------------------------------------------------------------------

def evaluate(regime: Regime, ds: Dataset) -> list:
    """Treatment labels prescribed by ``regime`` for every row of ``ds``."""
    levels = ds.schema.treatment_levels
    return [levels[c] for c in regime.assign(ds)]


def regime_from_dict(d: Mapping[str, Any]) -> Regime:
    kind = d.get("kind")
    rid = d.get("id")
    if kind == "static":
        return StaticRegime(d["label"], rid)
    if kind == "rule-list":
        return parse_rule_dsl(d["source"], rid or "rules")
    if kind == "lookup-table":
        return LookupRegime(d["columns"], {tuple(k): v for k, v in d["table"]},
                            d.get("default"), rid or "lookup")
    if kind == "learned":
        scorer = RffScorer(tuple(d["columns"]), np.asarray(d["mean"]), np.asarray(d["scale"]),
                           np.asarray(d["omega"], dtype=float).reshape(len(d["phase"]), -1),
                           np.asarray(d["phase"]), d["sigma"], d["lambda"],
                           np.asarray(d["intercepts"]), np.asarray(d["coefs"]),
                           d.get("seed", 0), d.get("meta", {}))
        return LearnedRegime(scorer, d["arms"], d.get("direction", "minimize") == "minimize",
                             rid or "f_rff")
    raise RegimeError(f"unknown regime kind {kind!r}")


def save_regime(regime: Regime, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(regime.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_regime(path: str | Path) -> Regime:
    path = Path(path)
    if path.suffix.lower() == ".json":
        with open(path, encoding="utf-8") as fh:
            return regime_from_dict(json.load(fh))
    return parse_rule_dsl(path.read_text(encoding="utf-8"), id=path.stem)
