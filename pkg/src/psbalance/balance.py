"""Covariate balance diagnostics.

The central metric is the absolute standardized bias (ASB): the absolute
difference in weighted covariate means between groups divided by the
*unweighted* standard error

    sqrt(s1^2 / N1 + s0^2 / N0),

with s_z^2 the unweighted within-group variance.  Keeping the denominator
unweighted makes ASB comparable across weighting schemes: a drop in ASB
can then only come from better balance, not from an inflated standard
error.  Under unit weights ASB is exactly the absolute two-sample
t-statistic.

Overlap weights computed from a converged logistic MLE give ASB = 0 for
every covariate included in the model: the score equations force the
overlap-weighted means to agree between groups.  ``verify_exact_balance``
measures that identity directly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import DataError, Dataset
from .propensity import PropensityModel
from .weights import WeightedSample

__all__ = [
    "CovariateBalance",
    "BalanceReport",
    "DistributionSummary",
    "CovariateDistribution",
    "asb",
    "verify_exact_balance",
    "weighted_distributions",
    "weighted_quantile",
    "export_balance_csv",
    "balance_report_dict",
    "export_distributions_csv",
]


@dataclass(frozen=True)
class CovariateBalance:
    """Balance measurements for one covariate under one weighting."""

    name: str
    mean_treated: float
    mean_control: float
    weighted_mean_treated: float
    weighted_mean_control: float
    var_treated: float
    var_control: float
    asb: float
    guaranteed: bool = True  # False for covariates outside the fitted model


@dataclass(frozen=True)
class BalanceReport:
    scheme_label: str
    rows: tuple[CovariateBalance, ...]

    @property
    def max_asb(self) -> float:
        return max(r.asb for r in self.rows)

    @property
    def median_asb(self) -> float:
        return float(np.median([r.asb for r in self.rows]))


def asb(
    data: Dataset,
    weights: WeightedSample,
    model_covariates: tuple[str, ...] | None = None,
) -> BalanceReport:
    """Absolute standardized bias of every covariate under the given weights.

    Parameters
    ----------
    data : Dataset
        Sample providing covariates and group sizes.
    weights : WeightedSample
        Weights whose balance is being assessed.
    model_covariates : tuple of str, optional
        Covariates that entered the propensity model.  Others are still
        reported but marked ``guaranteed=False``: mean balance for them
        is not implied by the score equations.

    Raises
    ------
    DataError
        If a covariate is constant in both groups (zero denominator).
    """
    z = data.treatment
    t = z == 1
    c = ~t
    n1, n0 = int(t.sum()), int(c.sum())
    w = weights.raw_weight
    wt, wc = w[t].sum(), w[c].sum()
    if wt <= 0 or wc <= 0:
        raise ValueError("both weighted group totals must be positive")
    if data.n_covariates == 0:
        raise ValueError("no covariates to assess")

    rows = []
    for j, name in enumerate(data.covariate_names):
        x = data.covariates[:, j]
        s1 = float(np.var(x[t], ddof=1)) if n1 > 1 else 0.0
        s0 = float(np.var(x[c], ddof=1)) if n0 > 1 else 0.0
        se = np.sqrt(s1 / n1 + s0 / n0)
        if se == 0.0:
            raise DataError(f"covariate {name!r} is constant in both groups; ASB undefined")
        wm1 = float(np.sum(x[t] * w[t]) / wt)
        wm0 = float(np.sum(x[c] * w[c]) / wc)
        rows.append(
            CovariateBalance(
                name=name,
                mean_treated=float(x[t].mean()),
                mean_control=float(x[c].mean()),
                weighted_mean_treated=wm1,
                weighted_mean_control=wm0,
                var_treated=s1,
                var_control=s0,
                asb=abs(wm1 - wm0) / float(se),
                guaranteed=(model_covariates is None) or (name in model_covariates),
            )
        )
    return BalanceReport(scheme_label=weights.provenance, rows=tuple(rows))


def verify_exact_balance(model: PropensityModel, data: Dataset) -> float:
    """Largest standardized gap between overlap-weighted covariate means.

    For each covariate, compares

        sum_i X_ik Z_i (1 - e_i) / sum_i Z_i (1 - e_i)

    against

        sum_i X_ik (1 - Z_i) e_i / sum_i (1 - Z_i) e_i,

    scaled by the covariate's standard deviation.  At a converged
    logistic MLE that includes the covariate as a main effect the gap is
    zero up to solver tolerance (< 1e-8 by default); for models that
    omit the covariate the gap is whatever imbalance remains.
    """
    for name in model.coefficient_names[1:]:
        if name not in data.covariate_names:
            raise DataError(f"model covariate {name!r} is not present in the dataset")
    z = data.treatment.astype(float)
    e = model.score
    wt = z * (1.0 - e)
    wc = (1.0 - z) * e
    st, sc = wt.sum(), wc.sum()
    if st <= 0 or sc <= 0:
        raise ValueError("degenerate scores: a group's total overlap weight is zero")

    worst = 0.0
    for j in range(data.n_covariates):
        x = data.covariates[:, j]
        sd = float(np.std(x, ddof=1))
        if sd == 0.0:
            continue
        gap = abs(float(np.sum(x * wt) / st) - float(np.sum(x * wc) / sc)) / sd
        worst = max(worst, gap)
    return worst


# ---------------------------------------------------------------------------
# Weighted distribution summaries
# ---------------------------------------------------------------------------

QUANTILE_LEVELS = (0.05, 0.25, 0.50, 0.75, 0.95)


def weighted_quantile(values: np.ndarray, weights: np.ndarray, q) -> np.ndarray:
    """Weighted quantiles with linear interpolation between midpoints.

    Each sorted value sits at cumulative position (c_i - w_i/2) / W;
    quantiles interpolate linearly between those positions.  For two
    points of equal weight the median is their midpoint.
    """
    v = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    if (w < 0).any() or w.sum() <= 0:
        raise ValueError("weights must be non-negative with positive total")
    order = np.argsort(v, kind="stable")
    v, w = v[order], w[order]
    cum = np.cumsum(w)
    pos = (cum - 0.5 * w) / cum[-1]
    return np.interp(np.asarray(q, dtype=float), pos, v)


@dataclass(frozen=True)
class CovariateDistribution:
    name: str
    bin_edges: np.ndarray
    treated_mass: np.ndarray
    control_mass: np.ndarray
    treated_quantiles: tuple[float, ...]
    control_quantiles: tuple[float, ...]


@dataclass(frozen=True)
class DistributionSummary:
    scheme_label: str
    covariates: tuple[CovariateDistribution, ...]


def weighted_distributions(
    data: Dataset,
    weights: WeightedSample,
    bins: int | None = None,
) -> DistributionSummary:
    """Weighted histograms and quantiles per covariate and group.

    Bin edges are shared between the groups: Freedman-Diaconis on the
    pooled unweighted values by default, or ``bins`` equal-width bins.
    Masses use the group-normalized weights, so each group's histogram
    sums to 1.
    """
    if bins is not None and bins < 2:
        raise ValueError("bins must be >= 2")
    z = data.treatment
    t = z == 1
    nw = weights.normalized_weight

    out = []
    for j, name in enumerate(data.covariate_names):
        x = data.covariates[:, j]
        if bins is None:
            edges = np.histogram_bin_edges(x, bins="fd")
            if len(edges) < 3:
                edges = np.histogram_bin_edges(x, bins=2)
        else:
            edges = np.histogram_bin_edges(x, bins=bins)
        mass_t, _ = np.histogram(x[t], bins=edges, weights=nw[t])
        mass_c, _ = np.histogram(x[~t], bins=edges, weights=nw[~t])
        out.append(
            CovariateDistribution(
                name=name,
                bin_edges=edges,
                treated_mass=mass_t,
                control_mass=mass_c,
                treated_quantiles=tuple(weighted_quantile(x[t], nw[t], QUANTILE_LEVELS)),
                control_quantiles=tuple(weighted_quantile(x[~t], nw[~t], QUANTILE_LEVELS)),
            )
        )
    return DistributionSummary(scheme_label=weights.provenance, covariates=tuple(out))


# ---------------------------------------------------------------------------
# Plot-ready exports
# ---------------------------------------------------------------------------

def export_balance_csv(report: BalanceReport, path) -> None:
    """One row per covariate: means, variances, and ASB under the scheme."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "scheme", "covariate", "mean_treated", "mean_control",
                "weighted_mean_treated", "weighted_mean_control",
                "var_treated", "var_control", "asb", "guaranteed",
            ]
        )
        for r in report.rows:
            writer.writerow(
                [
                    report.scheme_label, r.name,
                    repr(r.mean_treated), repr(r.mean_control),
                    repr(r.weighted_mean_treated), repr(r.weighted_mean_control),
                    repr(r.var_treated), repr(r.var_control),
                    repr(r.asb), int(r.guaranteed),
                ]
            )


def balance_report_dict(report: BalanceReport) -> dict:
    return {
        "scheme": report.scheme_label,
        "max_asb": report.max_asb,
        "median_asb": report.median_asb,
        "covariates": [
            {
                "name": r.name,
                "mean_treated": r.mean_treated,
                "mean_control": r.mean_control,
                "weighted_mean_treated": r.weighted_mean_treated,
                "weighted_mean_control": r.weighted_mean_control,
                "var_treated": r.var_treated,
                "var_control": r.var_control,
                "asb": r.asb,
                "guaranteed": r.guaranteed,
            }
            for r in report.rows
        ],
    }


def export_distributions_csv(summary: DistributionSummary, path) -> None:
    """Histogram masses per covariate, group, and bin (plot-ready)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scheme", "covariate", "group", "bin_lower", "bin_upper", "mass"])
        for cov in summary.covariates:
            for grp, mass in (("1", cov.treated_mass), ("0", cov.control_mass)):
                for b in range(mass.size):
                    writer.writerow(
                        [
                            summary.scheme_label, cov.name, grp,
                            repr(float(cov.bin_edges[b])),
                            repr(float(cov.bin_edges[b + 1])),
                            repr(float(mass[b])),
                        ]
                    )
