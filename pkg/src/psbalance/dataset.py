"""Tabular ingestion and design-matrix construction.

A :class:`Dataset` holds a validated two-group sample: a binary group
indicator, an optional outcome, an encoded covariate matrix, and per-unit
sampling weights.  Ingestion is strict: missing cells, non-binary group
codes, and empty groups are hard errors rather than silent repairs.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "DataError",
    "Power",
    "Interaction",
    "Indicator",
    "CovariateSpec",
    "IngestionSchema",
    "Dataset",
    "load",
    "expand",
    "write",
    "canonical_schema",
]

MISSING_TOKENS = {"", "NA", "N/A", "NaN", "nan", "NULL", "null"}


class DataError(ValueError):
    """Raised for invalid input data or ingestion configuration."""


# ---------------------------------------------------------------------------
# Derived-term transforms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Power:
    """Append powers x^2 .. x^degree of the source column."""

    degree: int

    def __post_init__(self):
        if self.degree < 1:
            raise DataError(f"power degree must be >= 1, got {self.degree}")

    def column_names(self, source: str) -> list[str]:
        return [f"{source}^{d}" for d in range(2, self.degree + 1)]

    def apply(self, values: np.ndarray) -> list[np.ndarray]:
        return [values**d for d in range(2, self.degree + 1)]


@dataclass(frozen=True)
class Interaction:
    """Append the product of the source column with another column."""

    other: str

    def column_names(self, source: str) -> list[str]:
        return [f"{source}*{self.other}"]


@dataclass(frozen=True)
class Indicator:
    """Append the indicator 1(lower < x < upper), strict on both ends."""

    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower < self.upper:
            raise DataError(
                f"indicator range must satisfy lower < upper, got ({self.lower}, {self.upper})"
            )

    def column_names(self, source: str) -> list[str]:
        return [f"I({self.lower:g}<{source}<{self.upper:g})"]

    def apply(self, values: np.ndarray) -> list[np.ndarray]:
        return [((values > self.lower) & (values < self.upper)).astype(float)]


Transform = Power | Interaction | Indicator


def _parse_transform(obj) -> Transform:
    """Parse a transform from its declarative form, e.g. {"power": 2}."""
    if isinstance(obj, (Power, Interaction, Indicator)):
        return obj
    if isinstance(obj, dict) and len(obj) == 1:
        key, val = next(iter(obj.items()))
        if key == "power":
            return Power(int(val))
        if key == "interaction":
            return Interaction(str(val))
        if key == "indicator":
            lo, hi = val
            return Indicator(float(lo), float(hi))
    raise DataError(f"unrecognized transform: {obj!r}")


# ---------------------------------------------------------------------------
# Covariate specification and ingestion schema
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CovariateSpec:
    """How one source column enters the design matrix.

    Parameters
    ----------
    column : str
        Source column name in the input file.
    kind : {"continuous", "binary", "categorical"}
        Encoding. Categorical columns expand to (levels - 1) dummy
        columns against a reference level; the others are read as-is.
    transforms : tuple
        Ordered derived terms (:class:`Power`, :class:`Interaction`,
        :class:`Indicator`), applied after encoding. Not allowed for
        categorical sources.
    reference : str, optional
        Reference level for categorical columns. Defaults to the
        lexicographically smallest observed level.
    """

    column: str
    kind: str = "continuous"
    transforms: tuple[Transform, ...] = ()
    reference: str | None = None

    def __post_init__(self):
        if self.kind not in ("continuous", "binary", "categorical"):
            raise DataError(f"unknown covariate kind {self.kind!r} for {self.column!r}")
        if self.kind == "categorical" and self.transforms:
            raise DataError(f"transforms are not supported on categorical column {self.column!r}")
        object.__setattr__(self, "transforms", tuple(_parse_transform(t) for t in self.transforms))

    @classmethod
    def from_dict(cls, obj: dict) -> "CovariateSpec":
        return cls(
            column=obj["column"],
            kind=obj.get("kind", "continuous"),
            transforms=tuple(obj.get("transforms", ())),
            reference=obj.get("reference"),
        )


@dataclass(frozen=True)
class IngestionSchema:
    """Declarative description of the input file's columns."""

    treatment: str
    covariates: tuple[CovariateSpec, ...]
    outcome: str | None = None
    sampling_weight: str | None = None

    def __post_init__(self):
        object.__setattr__(
            self,
            "covariates",
            tuple(c if isinstance(c, CovariateSpec) else CovariateSpec.from_dict(c) for c in self.covariates),
        )

    @classmethod
    def from_dict(cls, obj: dict) -> "IngestionSchema":
        return cls(
            treatment=obj["treatment"],
            covariates=tuple(obj.get("covariates", ())),
            outcome=obj.get("outcome"),
            sampling_weight=obj.get("sampling_weight"),
        )

    def to_dict(self) -> dict:
        covs = []
        for c in self.covariates:
            entry: dict = {"column": c.column, "kind": c.kind}
            if c.reference is not None:
                entry["reference"] = c.reference
            if c.transforms:
                tr = []
                for t in c.transforms:
                    if isinstance(t, Power):
                        tr.append({"power": t.degree})
                    elif isinstance(t, Interaction):
                        tr.append({"interaction": t.other})
                    else:
                        tr.append({"indicator": [t.lower, t.upper]})
                entry["transforms"] = tr
            covs.append(entry)
        out = {"treatment": self.treatment, "covariates": covs}
        if self.outcome is not None:
            out["outcome"] = self.outcome
        if self.sampling_weight is not None:
            out["sampling_weight"] = self.sampling_weight
        return out


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    """A validated two-group sample.

    Immutable after construction; the arrays are marked read-only so
    the object can be shared across concurrent workers.
    """

    treatment: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple[str, ...]
    outcome: np.ndarray | None = None
    sampling_weight: np.ndarray | None = None

    def __post_init__(self):
        z = np.asarray(self.treatment)
        if z.ndim != 1 or z.size == 0:
            raise DataError("treatment must be a non-empty 1-d array")
        if not np.isin(z, (0, 1)).all():
            bad = np.unique(z[~np.isin(z, (0, 1))])
            raise DataError(f"treatment must be coded 0/1, found value(s) {bad.tolist()}")
        z = z.astype(np.int64)

        x = np.array(self.covariates, dtype=float)
        if x.ndim != 2 or x.shape[0] != z.size:
            raise DataError("covariates must be a 2-d array with one row per unit")
        if x.shape[1] != len(self.covariate_names):
            raise DataError("covariate_names length does not match the design matrix")
        if len(set(self.covariate_names)) != len(self.covariate_names):
            raise DataError("covariate names must be unique")
        if not np.isfinite(x).all():
            raise DataError("covariates contain missing or non-finite values")

        if z.sum() == 0:
            raise DataError("empty treated group (no units with treatment == 1)")
        if z.sum() == z.size:
            raise DataError("empty control group (no units with treatment == 0)")

        y = self.outcome
        if y is not None:
            y = np.array(y, dtype=float)
            if y.shape != z.shape:
                raise DataError("outcome must have one value per unit")
            if not np.isfinite(y).all():
                raise DataError("outcome contains missing or non-finite values")

        w = self.sampling_weight
        if w is None:
            w = np.ones(z.size)
        else:
            w = np.array(w, dtype=float)
            if w.shape != z.shape:
                raise DataError("sampling_weight must have one value per unit")
            if not np.isfinite(w).all() or (w <= 0).any():
                raise DataError("sampling weights must be finite and strictly positive")

        for arr in (z, x, y, w):
            if arr is not None:
                arr.setflags(write=False)
        object.__setattr__(self, "treatment", z)
        object.__setattr__(self, "covariates", x)
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        object.__setattr__(self, "outcome", y)
        object.__setattr__(self, "sampling_weight", w)

    @property
    def n_units(self) -> int:
        return self.treatment.size

    @property
    def n_treated(self) -> int:
        return int(self.treatment.sum())

    @property
    def n_control(self) -> int:
        return self.n_units - self.n_treated

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    @property
    def constant_columns(self) -> tuple[str, ...]:
        """Names of covariate columns with zero variance (flagged, not dropped)."""
        x = self.covariates
        const = np.all(x == x[0:1, :], axis=0)
        return tuple(n for n, c in zip(self.covariate_names, const) if c)

    def column(self, name: str) -> np.ndarray:
        """Return one covariate column by name."""
        try:
            j = self.covariate_names.index(name)
        except ValueError:
            raise DataError(f"unknown covariate column {name!r}") from None
        return self.covariates[:, j]

    def with_outcome(self, outcome: np.ndarray) -> "Dataset":
        return replace(self, outcome=np.asarray(outcome, dtype=float))


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def _parse_cell(raw: str | None, row: int, col: str) -> float:
    if raw is None or raw.strip() in MISSING_TOKENS:
        raise DataError(f"missing value in row {row}, column {col!r}")
    try:
        return float(raw)
    except ValueError:
        raise DataError(f"cannot parse {raw!r} as a number (row {row}, column {col!r})") from None


def _read_rows(path) -> tuple[list[str], list[dict]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file, expected a header row")
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return list(reader.fieldnames), rows


def load(path, schema: IngestionSchema | dict) -> Dataset:
    """Read a CSV file and build a validated :class:`Dataset`.

    Parameters
    ----------
    path : path-like
        CSV file with a header row, UTF-8, '.' decimal separator.
    schema : IngestionSchema or dict
        Names the treatment column, optional outcome and sampling-weight
        columns, and the covariate specifications.

    Raises
    ------
    DataError
        On missing columns, missing cells, non-binary treatment codes,
        non-positive sampling weights, or an empty group.
    """
    if isinstance(schema, dict):
        schema = IngestionSchema.from_dict(schema)
    header, rows = _read_rows(path)

    needed = [schema.treatment] + [c.column for c in schema.covariates]
    if schema.outcome:
        needed.append(schema.outcome)
    if schema.sampling_weight:
        needed.append(schema.sampling_weight)
    for col in needed:
        if col not in header:
            raise DataError(f"column {col!r} not found in {path}")

    n = len(rows)
    z = np.empty(n)
    for i, r in enumerate(rows):
        v = _parse_cell(r.get(schema.treatment), i, schema.treatment)
        if v not in (0.0, 1.0):
            raise DataError(f"non-binary treatment value {v!r} in row {i}")
        z[i] = v

    columns: list[np.ndarray] = []
    names: list[str] = []
    for spec in schema.covariates:
        if spec.kind == "categorical":
            raw = []
            for i, r in enumerate(rows):
                cell = r.get(spec.column)
                if cell is None or cell.strip() in MISSING_TOKENS:
                    raise DataError(f"missing value in row {i}, column {spec.column!r}")
                raw.append(cell.strip())
            levels = sorted(set(raw))
            reference = spec.reference if spec.reference is not None else levels[0]
            if reference not in levels:
                raise DataError(
                    f"reference level {reference!r} not observed in column {spec.column!r}"
                )
            for level in levels:
                if level == reference:
                    continue
                names.append(f"{spec.column}={level}")
                columns.append(np.array([1.0 if v == level else 0.0 for v in raw]))
        else:
            vals = np.array([_parse_cell(r.get(spec.column), i, spec.column) for i, r in enumerate(rows)])
            if spec.kind == "binary" and not np.isin(vals, (0.0, 1.0)).all():
                raise DataError(f"column {spec.column!r} declared binary but has non-0/1 values")
            names.append(spec.column)
            columns.append(vals)

    x = np.column_stack(columns) if columns else np.empty((n, 0))

    y = None
    if schema.outcome:
        y = np.array([_parse_cell(r.get(schema.outcome), i, schema.outcome) for i, r in enumerate(rows)])

    w = None
    if schema.sampling_weight:
        w = np.array(
            [_parse_cell(r.get(schema.sampling_weight), i, schema.sampling_weight) for i, r in enumerate(rows)]
        )
        if (w <= 0).any():
            raise DataError("non-positive sampling weight encountered")

    data = Dataset(treatment=z, covariates=x, covariate_names=tuple(names), outcome=y, sampling_weight=w)

    numeric_specs = [s for s in schema.covariates if s.transforms]
    if numeric_specs:
        data = expand(data, numeric_specs)

    logger.info(
        "loaded %s: n_treated=%d n_control=%d covariates=%d",
        path, data.n_treated, data.n_control, data.n_covariates,
    )
    if data.constant_columns:
        warnings.warn(f"constant covariate column(s): {', '.join(data.constant_columns)}")
    return data


def expand(data: Dataset, specs) -> Dataset:
    """Append derived covariate columns (powers, interactions, indicators).

    Original columns are retained; derived columns follow in the order
    of the specs, so identical inputs always yield identical matrices.
    """
    new_cols: list[np.ndarray] = []
    new_names: list[str] = []
    for spec in specs:
        if isinstance(spec, dict):
            spec = CovariateSpec.from_dict(spec)
        base = data.column(spec.column)
        for t in spec.transforms:
            if isinstance(t, Interaction):
                other = data.column(t.other)
                new_cols.append(base * other)
            else:
                new_cols.extend(t.apply(base))
            new_names.extend(t.column_names(spec.column))

    if not new_cols:
        return data
    x = np.hstack([data.covariates, np.column_stack(new_cols)])
    return Dataset(
        treatment=data.treatment,
        covariates=x,
        covariate_names=data.covariate_names + tuple(new_names),
        outcome=data.outcome,
        sampling_weight=data.sampling_weight,
    )


# ---------------------------------------------------------------------------
# Canonical CSV output
# ---------------------------------------------------------------------------

def write(data: Dataset, path) -> None:
    """Write the dataset in canonical CSV form.

    Floats are written with `repr` so that ``load(write(d))`` reproduces
    every numeric field bit-for-bit.
    """
    path = Path(path)
    header = ["treatment"]
    if data.outcome is not None:
        header.append("outcome")
    header.append("sampling_weight")
    header.extend(data.covariate_names)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(data.n_units):
            row: list[str] = [str(int(data.treatment[i]))]
            if data.outcome is not None:
                row.append(repr(float(data.outcome[i])))
            row.append(repr(float(data.sampling_weight[i])))
            row.extend(repr(float(v)) for v in data.covariates[i])
            writer.writerow(row)


def canonical_schema(data: Dataset) -> IngestionSchema:
    """Schema that reads back a file produced by :func:`write`."""
    return IngestionSchema(
        treatment="treatment",
        outcome="outcome" if data.outcome is not None else None,
        sampling_weight="sampling_weight",
        covariates=tuple(CovariateSpec(column=n) for n in data.covariate_names),
    )
