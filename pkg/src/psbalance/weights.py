"""Balancing weights for two-group comparisons.

A tilting function ``h(x)`` picks the target population with density
proportional to ``f(x)h(x)``; the matching per-unit weights are

    w1 = h/e      for treated units,
    w0 = h/(1-e)  for control units,

up to within-group normalization.  The built-in schemes:

================  ==================  =============================
target population  h(x)                weight (w1, w0)
================  ==================  =============================
combined           1                   (1/e, 1/(1-e))        [HT]
treated            e                   (1, e/(1-e))          [ATT]
control            1-e                 ((1-e)/e, 1)          [ATC]
truncated          1(a < e < 1-a)      HT times the indicator
overlap            e(1-e)              (1-e, e)
covariate range    1(a < x_col < b)    HT times the indicator
================  ==================  =============================

Overlap weights are bounded in [0, 1] by construction and place the most
weight on units that could plausibly belong to either group.
"""

from __future__ import annotations

import csv
import inspect
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .dataset import Dataset
from .propensity import PropensityModel

__all__ = [
    "EmptyTargetError",
    "WeightScheme",
    "WeightedSample",
    "compute",
    "combine_sampling_weights",
    "multigroup_overlap",
    "parse_scheme",
    "export_weights_csv",
]


class EmptyTargetError(ValueError):
    """A group's total weight is zero: the target population is empty."""


@dataclass(frozen=True)
class WeightScheme:
    """A named tilting function h(x).

    Build instances via the classmethods (:meth:`ht`, :meth:`att`,
    :meth:`atc`, :meth:`truncated`, :meth:`overlap`,
    :meth:`covariate_indicator`, :meth:`custom`, :meth:`unweighted`).
    """

    kind: str
    alpha: float | None = None
    column: str | None = None
    lower: float | None = None
    upper: float | None = None
    h_function: Callable | None = None
    name: str | None = None

    def __post_init__(self):
        if self.kind == "truncated":
            if self.alpha is None or not 0.0 <= self.alpha < 0.5:
                raise ValueError(f"truncation alpha must lie in [0, 0.5), got {self.alpha}")
        if self.kind == "covariate_indicator":
            if self.column is None or self.lower is None or self.upper is None:
                raise ValueError("covariate_indicator needs column, lower, and upper")
            if not self.lower < self.upper:
                raise ValueError("covariate_indicator needs lower < upper")
        if self.kind == "custom" and self.h_function is None:
            raise ValueError("custom scheme needs an h function")

    @classmethod
    def ht(cls) -> "WeightScheme":
        """Inverse-probability weights targeting the combined population (ATE)."""
        return cls(kind="ht")

    @classmethod
    def att(cls) -> "WeightScheme":
        """Weights targeting the treated population."""
        return cls(kind="att")

    @classmethod
    def atc(cls) -> "WeightScheme":
        """Weights targeting the control population."""
        return cls(kind="atc")

    @classmethod
    def truncated(cls, alpha: float) -> "WeightScheme":
        """HT weights zeroed outside the open interval alpha < e < 1 - alpha."""
        return cls(kind="truncated", alpha=float(alpha))

    @classmethod
    def overlap(cls) -> "WeightScheme":
        """Variance-optimal bounded weights (1-e, e) targeting the overlap population."""
        return cls(kind="overlap")

    @classmethod
    def covariate_indicator(cls, column: str, lower: float, upper: float) -> "WeightScheme":
        """HT weights restricted to units with lower < x[column] < upper."""
        return cls(kind="covariate_indicator", column=column, lower=float(lower), upper=float(upper))

    @classmethod
    def custom(cls, h: Callable, name: str | None = None) -> "WeightScheme":
        """User tilting function; called as h(score) or h(score, covariates)."""
        return cls(kind="custom", h_function=h, name=name)

    @classmethod
    def unweighted(cls) -> "WeightScheme":
        """Unit weights; the baseline comparator, not a balancing scheme."""
        return cls(kind="unweighted")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.kind == "truncated":
            return f"truncated({self.alpha:g})"
        if self.kind == "covariate_indicator":
            return f"indicator({self.lower:g}<{self.column}<{self.upper:g})"
        return self.kind

    def tilt(self, score: np.ndarray, data: Dataset | None = None) -> np.ndarray:
        """Evaluate h at each unit's score (and covariates where relevant)."""
        e = np.asarray(score, dtype=float)
        if self.kind in ("ht", "unweighted"):
            return np.ones_like(e)
        if self.kind == "att":
            return e.copy()
        if self.kind == "atc":
            return 1.0 - e
        if self.kind == "overlap":
            return e * (1.0 - e)
        if self.kind == "truncated":
            return ((e > self.alpha) & (e < 1.0 - self.alpha)).astype(float)
        if self.kind == "covariate_indicator":
            if data is None:
                raise ValueError("covariate_indicator scheme needs the dataset")
            x = data.column(self.column)
            return ((x > self.lower) & (x < self.upper)).astype(float)
        if self.kind == "custom":
            if len(inspect.signature(self.h_function).parameters) >= 2:
                h = self.h_function(e, data.covariates if data is not None else None)
            else:
                h = self.h_function(e)
            h = np.asarray(h, dtype=float)
            if h.shape != e.shape:
                raise ValueError("custom h must return one value per unit")
            if not np.isfinite(h).all() or (h < 0).any():
                raise ValueError("custom h returned negative or non-finite values")
            return h
        raise ValueError(f"unknown scheme kind {self.kind!r}")


def parse_scheme(text: str) -> WeightScheme:
    """Parse a scheme from CLI/config syntax, e.g. "overlap" or "truncated:0.1"."""
    raw = text.strip().lower()
    key, _, arg = raw.partition(":")
    aliases = {
        "ht": WeightScheme.ht,
        "ipw": WeightScheme.ht,
        "combined": WeightScheme.ht,
        "att": WeightScheme.att,
        "treated": WeightScheme.att,
        "atc": WeightScheme.atc,
        "control": WeightScheme.atc,
        "overlap": WeightScheme.overlap,
        "ato": WeightScheme.overlap,
        "unweighted": WeightScheme.unweighted,
    }
    if key in aliases:
        if arg:
            raise ValueError(f"scheme {key!r} takes no parameter")
        return aliases[key]()
    if key in ("truncated", "trunc"):
        if not arg:
            raise ValueError("truncated scheme needs an alpha, e.g. 'truncated:0.1'")
        return WeightScheme.truncated(float(arg))
    if key == "indicator":
        col, lo, hi = arg.split(",")
        return WeightScheme.covariate_indicator(col, float(lo), float(hi))
    raise ValueError(f"unknown weighting scheme {text!r}")


@dataclass(frozen=True)
class WeightedSample:
    """Per-unit balancing weights with their provenance.

    ``raw_weight`` is h/e or h/(1-e); ``normalized_weight`` rescales the
    raw weights to sum to 1 within each group.
    """

    raw_weight: np.ndarray
    normalized_weight: np.ndarray
    treatment: np.ndarray
    score: np.ndarray
    scheme: WeightScheme
    sampling_weighted: bool = False

    @property
    def provenance(self) -> str:
        label = self.scheme.label
        return f"{label} x sampling weight" if self.sampling_weighted else label

    def group_total(self, group: int) -> float:
        return float(self.raw_weight[self.treatment == group].sum())

    def effective_sample_size(self, group: int) -> float:
        """Kish effective sample size (sum w)^2 / sum w^2 for one group."""
        w = self.raw_weight[self.treatment == group]
        s2 = float((w * w).sum())
        return float(w.sum()) ** 2 / s2 if s2 > 0 else 0.0


def _normalize_by_group(w: np.ndarray, z: np.ndarray, scheme: WeightScheme) -> np.ndarray:
    out = np.zeros_like(w)
    for grp in (1, 0):
        mask = z == grp
        total = w[mask].sum()
        if total <= 0:
            raise EmptyTargetError(
                f"empty target population: total {scheme.label} weight in group {grp} is zero"
            )
        out[mask] = w[mask] / total
    return out


def compute(
    model: PropensityModel | np.ndarray,
    data: Dataset,
    scheme: WeightScheme,
) -> WeightedSample:
    """Turn propensity scores into balancing weights under a scheme.

    Parameters
    ----------
    model : PropensityModel or ndarray
        A fitted model, or a raw score vector (e.g. saturated-model or
        externally supplied scores).
    data : Dataset
        The sample the scores belong to.
    scheme : WeightScheme
        Tilting function selecting the target population.

    Raises
    ------
    ValueError
        If a needed score equals exactly 0 or 1 (probabilistic
        assignment violated; possible only under separation), or a
        custom h misbehaves.
    EmptyTargetError
        If a group's total weight is zero (e.g. truncation emptied it).
    """
    score = model.score if isinstance(model, PropensityModel) else np.asarray(model, dtype=float)
    if score.shape != (data.n_units,):
        raise ValueError("scores must align with the dataset, one per unit")
    if ((score < 0) | (score > 1)).any():
        raise ValueError("propensity scores must lie in [0, 1]")

    z = data.treatment
    if scheme.kind == "unweighted":
        w = np.ones(data.n_units)
    else:
        h = scheme.tilt(score, data)
        denom = np.where(z == 1, score, 1.0 - score)
        active = h > 0
        if (denom[active] == 0.0).any():
            raise ValueError(
                f"{scheme.label} weight undefined: score exactly 0 or 1 with positive h "
                "(probabilistic assignment violated)"
            )
        w = np.zeros(data.n_units)
        w[active] = h[active] / denom[active]

    return WeightedSample(
        raw_weight=w,
        normalized_weight=_normalize_by_group(w, z, scheme),
        treatment=z,
        score=score,
        scheme=scheme,
    )


def combine_sampling_weights(weights: WeightedSample, data: Dataset) -> WeightedSample:
    """Multiply balancing weights by the per-unit sampling weights.

    Each raw weight becomes ``w_i * W_i`` and the normalized weights are
    recomputed per group; the sample's provenance records the combination.
    """
    w = weights.raw_weight * data.sampling_weight
    return replace(
        weights,
        raw_weight=w,
        normalized_weight=_normalize_by_group(w, weights.treatment, weights.scheme),
        sampling_weighted=True,
    )


def multigroup_overlap(probabilities: np.ndarray) -> np.ndarray:
    """Generalized overlap weights for J >= 2 groups.

    For assignment probabilities ``e_1..e_J`` summing to 1 per unit, the
    tilting function minimizing the total variance of the weighted group
    means is ``h = (sum_j 1/e_j)^-1``, giving weights ``w_j = h / e_j``.
    Returned unnormalized; for J = 2 this reduces exactly to the
    two-group overlap weights (1-e, e).
    """
    p = np.asarray(probabilities, dtype=float)
    if p.ndim != 2 or p.shape[1] < 2:
        raise ValueError("probabilities must be an (n, J) array with J >= 2")
    if ((p <= 0) | (p >= 1)).any():
        raise ValueError("each probability must lie strictly in (0, 1)")
    if np.max(np.abs(p.sum(axis=1) - 1.0)) > 1e-12:
        raise ValueError("probability rows must sum to 1 within 1e-12")
    h = 1.0 / np.sum(1.0 / p, axis=1)
    return h[:, None] / p


def export_weights_csv(weights: WeightedSample, path, unit_ids=None) -> None:
    """Write (unit id, group, score, raw weight, normalized weight) rows."""
    path = Path(path)
    n = weights.raw_weight.size
    ids = unit_ids if unit_ids is not None else range(n)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit_id", "group", "score", "raw_weight", "normalized_weight"])
        for i, uid in zip(range(n), ids):
            writer.writerow(
                [
                    uid,
                    int(weights.treatment[i]),
                    repr(float(weights.score[i])),
                    repr(float(weights.raw_weight[i])),
                    repr(float(weights.normalized_weight[i])),
                ]
            )
