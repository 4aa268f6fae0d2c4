"""Tabular data model: schemas, datasets, cell indexing and CSV ingestion."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

NUMERIC = "numeric"
CATEGORICAL = "categorical"
BINARY = "binary"
REAL = "real"

_TYPE_ALIASES = {
    "numeric": NUMERIC,
    "real": NUMERIC,
    "float": NUMERIC,
    "continuous": NUMERIC,
    "categorical": CATEGORICAL,
    "factor": CATEGORICAL,
    "binary": BINARY,
}


class IngestionError(ValueError):
    """Raised when a CSV file does not conform to its schema."""


class SchemaError(ValueError):
    pass


def _same_label(a: Any, b: Any) -> bool:
    if isinstance(a, str) or isinstance(b, str):
        return str(a) == str(b)
    return float(a) == float(b)


def format_label(value: Any) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if float(value).is_integer() and isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


@dataclass(frozen=True)
class ColumnSpec:
    """One declared column. ``levels`` is set for categorical columns only."""

    name: str
    kind: str
    levels: tuple | None = None

    def __post_init__(self):
        kind = _TYPE_ALIASES.get(self.kind, None)
        if kind is None:
            raise SchemaError(f"column {self.name!r}: unknown type {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if kind == CATEGORICAL:
            if not self.levels:
                raise SchemaError(f"column {self.name!r}: categorical column needs levels")
            levels = tuple(self.levels)
            for i, a in enumerate(levels):
                for b in levels[i + 1:]:
                    if _same_label(a, b):
                        raise SchemaError(f"column {self.name!r}: duplicate level {a!r}")
            object.__setattr__(self, "levels", levels)
        elif self.levels is not None:
            raise SchemaError(f"column {self.name!r}: levels given for a {kind} column")

    @property
    def numeric_levels(self) -> bool:
        return self.levels is not None and all(
            isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool)
            for v in self.levels
        )

    def code_of(self, value: Any) -> int:
        for i, level in enumerate(self.levels):
            if _same_label(level, value):
                return i
        raise KeyError(value)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"type": self.kind}
        if self.levels is not None:
            out["levels"] = list(self.levels)
        return out


@dataclass(frozen=True)
class Schema:
    """Declared columns plus the outcome and treatment roles.

    The treatment column must be categorical with at least two levels; the
    outcome column is either ``binary`` or ``numeric`` (real valued).
    """

    columns: tuple[ColumnSpec, ...]
    outcome: str
    treatment: str

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate column names in schema")
        if self.outcome not in names:
            raise SchemaError(f"outcome column {self.outcome!r} not declared")
        if self.treatment not in names:
            raise SchemaError(f"treatment column {self.treatment!r} not declared")
        t = self.column(self.treatment)
        if t.kind != CATEGORICAL or len(t.levels) < 2:
            raise SchemaError("treatment column must be categorical with at least 2 levels")
        if self.column(self.outcome).kind == CATEGORICAL:
            raise SchemaError("outcome column must be binary or numeric")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    @property
    def covariates(self) -> tuple[ColumnSpec, ...]:
        return tuple(c for c in self.columns if c.name not in (self.outcome, self.treatment))

    @property
    def treatment_levels(self) -> tuple:
        return self.column(self.treatment).levels

    @property
    def binary_outcome(self) -> bool:
        return self.column(self.outcome).kind == BINARY

    def column(self, name: str) -> ColumnSpec:
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(name)

    def treatment_code(self, label: Any) -> int:
        try:
            return self.column(self.treatment).code_of(label)
        except KeyError:
            raise SchemaError(f"undeclared treatment level {label!r}") from None

    def to_dict(self) -> dict:
        return {
            "outcome": self.outcome,
            "treatment": self.treatment,
            "columns": {c.name: c.to_dict() for c in self.columns},
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Schema":
        try:
            cols = [ColumnSpec(name, spec["type"], spec.get("levels"))
                    for name, spec in d["columns"].items()]
            return cls(tuple(cols), d["outcome"], d["treatment"])
        except KeyError as e:
            raise SchemaError(f"schema is missing key {e.args[0]!r}") from None
        except (AttributeError, TypeError):
            raise SchemaError("schema 'columns' must map column names to "
                              "{\"type\": ..., \"levels\": [...]} objects") from None

    @classmethod
    def load(cls, path: str | Path) -> "Schema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable table of outcome ``y``, treatment codes ``t`` and covariates.

    Categorical columns (including the treatment) are stored as integer codes
    into the declared level tuple; numeric columns as float64.
    """

    schema: Schema
    y: np.ndarray
    t: np.ndarray
    z: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        t = np.asarray(self.t, dtype=np.int64)
        n = y.shape[0]
        if y.ndim != 1 or t.shape != (n,):
            raise ValueError("y and t must be 1-d arrays of equal length")
        if n < 1:
            raise ValueError("dataset has 0 rows")
        k = len(self.schema.treatment_levels)
        if t.min() < 0 or t.max() >= k:
            raise ValueError("treatment codes out of range")
        if not np.all(np.isfinite(y)):
            raise ValueError("outcome contains missing or non-finite values")
        if self.schema.binary_outcome and not np.all((y == 0) | (y == 1)):
            raise ValueError("binary outcome must be 0/1")
        z = {}
        for col in self.schema.covariates:
            if col.name not in self.z:
                raise ValueError(f"missing covariate column {col.name!r}")
            if col.kind == CATEGORICAL:
                v = np.asarray(self.z[col.name], dtype=np.int64)
                if v.size and (v.min() < 0 or v.max() >= len(col.levels)):
                    raise ValueError(f"column {col.name}: codes out of range")
            else:
                v = np.asarray(self.z[col.name], dtype=float)
                if not np.all(np.isfinite(v)):
                    raise ValueError(f"column {col.name}: missing or non-finite values")
                if col.kind == BINARY and not np.all((v == 0) | (v == 1)):
                    raise ValueError(f"column {col.name}: binary column must be 0/1")
            if v.shape != (n,):
                raise ValueError(f"column {col.name}: wrong length")
            z[col.name] = _frozen(v)
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "t", _frozen(t))
        object.__setattr__(self, "z", z)

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def k(self) -> int:
        return len(self.schema.treatment_levels)

    def __len__(self) -> int:
        return self.n

    def codes(self, name: str) -> np.ndarray:
        if name == self.schema.treatment:
            return self.t
        col = self.schema.column(name)
        if col.kind != CATEGORICAL:
            raise TypeError(f"column {name!r} is not categorical")
        return self.z[name]

    def numeric(self, name: str) -> np.ndarray:
        """Numeric view of a column; categorical columns need numeric labels."""
        if name == self.schema.outcome:
            return self.y
        col = self.schema.column(name)
        if col.kind != CATEGORICAL:
            return self.z[name]
        if not col.numeric_levels:
            raise TypeError(f"column {name!r} has non-numeric levels")
        values = np.asarray(col.levels, dtype=float)
        codes = self.t if name == self.schema.treatment else self.z[name]
        return values[codes]

    def labels(self, name: str) -> list:
        col = self.schema.column(name)
        if col.kind != CATEGORICAL:
            return list(self.numeric(name))
        return [col.levels[c] for c in self.codes(name)]

    def treatment_labels(self) -> list:
        return self.labels(self.schema.treatment)

    def take(self, idx: Sequence[int] | np.ndarray) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.schema, self.y[idx], self.t[idx],
                       {k: v[idx] for k, v in self.z.items()})

    @classmethod
    def from_labels(cls, schema: Schema, y: Iterable, t: Iterable,
                    z: Mapping[str, Iterable]) -> "Dataset":
        tcol = schema.column(schema.treatment)
        t_codes = [tcol.code_of(v) for v in t]
        zz = {}
        for col in schema.covariates:
            vals = list(z[col.name])
            if col.kind == CATEGORICAL:
                zz[col.name] = [col.code_of(v) for v in vals]
            else:
                zz[col.name] = vals
        return cls(schema, np.asarray(list(y), dtype=float), np.asarray(t_codes), zz)


@dataclass(frozen=True)
class CellIndex:
    """Mixed-radix bijection between joint categorical values and cell ids."""

    columns: tuple[ColumnSpec, ...]

    @classmethod
    def for_schema(cls, schema: Schema, names: Sequence[str] | None = None) -> "CellIndex":
        if names is None:
            cols = tuple(c for c in schema.covariates if c.kind == CATEGORICAL)
        else:
            cols = tuple(schema.column(nm) for nm in names)
        for c in cols:
            if c.kind != CATEGORICAL:
                raise TypeError(f"column {c.name!r} is not categorical")
        return cls(cols)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(c.levels) for c in self.columns)

    @property
    def n_cells(self) -> int:
        return math.prod(self.sizes)

    def cell_ids(self, ds: Dataset) -> np.ndarray:
        ids = np.zeros(ds.n, dtype=np.int64)
        for c in self.columns:
            ids = ids * len(c.levels) + ds.codes(c.name)
        return ids

    def cell_of_codes(self, codes: Sequence[int]) -> int:
        cell = 0
        for c, code in zip(self.columns, codes):
            cell = cell * len(c.levels) + int(code)
        return cell

    def codes_of(self, cell: int) -> tuple[int, ...]:
        if not 0 <= cell < self.n_cells:
            raise IndexError(cell)
        out = []
        for size in reversed(self.sizes):
            out.append(cell % size)
            cell //= size
        return tuple(reversed(out))

    def key(self, cell: int) -> tuple:
        return tuple(c.levels[i] for c, i in zip(self.columns, self.codes_of(cell)))

    def keys(self) -> list[tuple]:
        return [self.key(i) for i in range(self.n_cells)]


def _parse_cell(raw: str, col: ColumnSpec, row: int) -> Any:
    text = raw.strip()
    if text == "" or text.upper() in ("NA", "NAN", "NULL"):
        raise IngestionError(f"row {row}, column {col.name}: missing value")
    if col.kind == CATEGORICAL:
        value: Any = text
        if col.numeric_levels:
            try:
                value = float(text)
            except ValueError:
                raise IngestionError(
                    f"row {row}, column {col.name}: unparseable value {text!r}") from None
        try:
            return col.code_of(value)
        except KeyError:
            raise IngestionError(
                f"row {row}, column {col.name}: undeclared level {text!r}") from None
    try:
        value = float(text)
    except ValueError:
        raise IngestionError(f"row {row}, column {col.name}: unparseable value {text!r}") from None
    if not math.isfinite(value):
        raise IngestionError(f"row {row}, column {col.name}: non-finite value")
    if col.kind == BINARY and value not in (0.0, 1.0):
        raise IngestionError(f"row {row}, column {col.name}: binary value must be 0 or 1")
    return value


def ingest_csv(path: str | Path, schema: Schema) -> Dataset:
    """Read a comma separated UTF-8 file with a header row into a Dataset.

    Rows are numbered from 1 (the first data row) in error messages.
    """
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"{path}: file not found")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestionError(f"{path}: missing header row") from None
        missing = [c.name for c in schema.columns if c.name not in header]
        if missing:
            raise IngestionError(f"missing column(s): {', '.join(missing)}")
        pos = {c.name: header.index(c.name) for c in schema.columns}
        values: dict[str, list] = {c.name: [] for c in schema.columns}
        row = 0
        for record in reader:
            if not record or all(not x.strip() for x in record):
                continue
            row += 1
            if len(record) != len(header):
                raise IngestionError(
                    f"row {row}: expected {len(header)} fields, found {len(record)}")
            for c in schema.columns:
                values[c.name].append(_parse_cell(record[pos[c.name]], c, row))
    if row == 0:
        raise IngestionError("dataset has 0 rows")
    z = {c.name: values[c.name] for c in schema.covariates}
    return Dataset(schema, np.asarray(values[schema.outcome], dtype=float),
                   np.asarray(values[schema.treatment], dtype=np.int64), z)


def write_csv(ds: Dataset, path: str | Path) -> None:
    schema = ds.schema
    columns = []
    for c in schema.columns:
        if c.name == schema.outcome:
            vals = ds.y
            columns.append([format_label(int(v)) if c.kind == BINARY else repr(float(v))
                            for v in vals])
        elif c.kind == CATEGORICAL:
            columns.append([format_label(v) for v in ds.labels(c.name)])
        elif c.kind == BINARY:
            columns.append([str(int(v)) for v in ds.z[c.name]])
        else:
            columns.append([repr(float(v)) for v in ds.z[c.name]])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(schema.names)
        w.writerows(zip(*columns))
