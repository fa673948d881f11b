"""Weighted average treatment effects and their uncertainty.

The point estimate is the normalized weighted difference of means

    tau = sum(Y Z w1) / sum(Z w1) - sum(Y (1-Z) w0) / sum((1-Z) w0),

read as a causal effect under unconfoundedness or as an average
controlled difference in descriptive comparisons.  Standard errors come
from a bootstrap that re-fits the propensity model inside every
replicate, since the estimated score is part of the procedure.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .dataset import DataError, Dataset
from .propensity import FitError, PropensityModel, fit, variance_inflation_preview
from .weights import EmptyTargetError, WeightedSample, WeightScheme, compute

__all__ = [
    "EstimateReport",
    "DecileEffect",
    "wate",
    "bootstrap_se",
    "effect_by_decile",
    "fixed_effects_oracle",
    "estimate_report_dict",
]


def wate(data: Dataset, weights: WeightedSample) -> float:
    """Weighted average treatment effect / average controlled difference.

    Raises
    ------
    DataError
        If the dataset has no outcome.
    EmptyTargetError
        If a group's total weight is zero (e.g. truncation emptied it).
    """
    if data.outcome is None:
        raise DataError("dataset has no outcome column; estimation needs one")
    y = data.outcome
    z = data.treatment
    w = weights.raw_weight
    t = z == 1
    wt, wc = w[t].sum(), w[~t].sum()
    if wt <= 0 or wc <= 0:
        raise EmptyTargetError(
            f"empty target population under scheme {weights.scheme.label!r}"
        )
    return float(np.sum(y[t] * w[t]) / wt - np.sum(y[~t] * w[~t]) / wc)


@dataclass(frozen=True)
class DecileEffect:
    index: int
    score_lower: float
    score_upper: float
    n_treated: int
    n_control: int
    estimable: bool
    tau_hat: float | None


@dataclass(frozen=True)
class EstimateReport:
    """Point estimate with bootstrap uncertainty and design diagnostics."""

    tau_hat: float
    scheme_label: str
    se_bootstrap: float
    n_replicates: int
    n_discarded: int
    seed: int
    variance_inflation: float
    refit_per_replicate: bool = True
    per_decile: tuple[DecileEffect, ...] | None = None
    replicate_estimates: np.ndarray | None = None


def _resample_indices(rng: np.random.Generator, z: np.ndarray, stratified: bool) -> np.ndarray:
    n = z.size
    if not stratified:
        return rng.integers(0, n, size=n)
    parts = []
    for grp in (1, 0):
        idx = np.flatnonzero(z == grp)
        parts.append(idx[rng.integers(0, idx.size, size=idx.size)])
    return np.concatenate(parts)


def _weights_for(data: Dataset, scheme: WeightScheme) -> tuple[WeightedSample, PropensityModel | None]:
    if scheme.kind == "unweighted":
        ws = compute(np.full(data.n_units, 0.5), data, scheme)
        return ws, None
    model = fit(data)
    if model.separation:
        raise FitError("separation detected; weights would be unreliable")
    return compute(model, data, scheme), model


def bootstrap_se(
    data: Dataset,
    scheme: WeightScheme,
    replicates: int,
    seed: int,
    *,
    stratified: bool = False,
    refit: bool = True,
    keep_replicates: bool = False,
    max_discard_fraction: float = 0.05,
) -> EstimateReport:
    """Bootstrap standard error of the weighted effect estimate.

    Each replicate resamples the units with replacement, re-fits the
    propensity model, recomputes the weights, and re-estimates the
    effect; the SE is the standard deviation of the replicate estimates.
    Replicate RNG streams derive from ``(seed, replicate index)``, so
    results are reproducible and independent of any execution order.

    Parameters
    ----------
    data : Dataset
        Sample with outcomes.
    scheme : WeightScheme
        Weighting scheme under study.
    replicates : int
        Number of bootstrap draws (>= 2).
    seed : int
        RNG seed; required for reproducibility.
    stratified : bool
        Resample within each group, preserving group sizes. The default
        resamples all units jointly.
    refit : bool
        Re-fit the propensity model per replicate (default). ``False``
        reuses each unit's full-sample weight; faster but approximate,
        and flagged as such in the report.
    keep_replicates : bool
        Retain the replicate estimates in the report.
    max_discard_fraction : float
        Abort if more than this fraction of replicates fails (empty
        group or failed fit); failures are otherwise discarded and
        counted.
    """
    if replicates < 2:
        raise ValueError("need at least 2 bootstrap replicates")
    if data.outcome is None:
        raise DataError("dataset has no outcome column; estimation needs one")

    full_weights, _ = _weights_for(data, scheme)
    tau = wate(data, full_weights)

    estimates = []
    discarded = 0
    for r in range(replicates):
        rng = np.random.default_rng((seed, r))
        idx = _resample_indices(rng, data.treatment, stratified)
        try:
            boot = Dataset(
                treatment=data.treatment[idx],
                covariates=data.covariates[idx],
                covariate_names=data.covariate_names,
                outcome=data.outcome[idx],
                sampling_weight=data.sampling_weight[idx],
            )
            if refit:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    ws, _ = _weights_for(boot, scheme)
            else:
                # fixed-score mode: reuse each unit's full-sample score
                ws = compute(full_weights.score[idx], boot, scheme)
            estimates.append(wate(boot, ws))
        except (DataError, FitError, EmptyTargetError, ValueError):
            discarded += 1

    if discarded > max_discard_fraction * replicates:
        raise FitError(
            f"{discarded}/{replicates} bootstrap replicates failed "
            f"(limit {max_discard_fraction:.0%}); the SE would be unreliable"
        )
    if discarded:
        warnings.warn(f"discarded {discarded}/{replicates} failed bootstrap replicates")

    est = np.array(estimates)
    return EstimateReport(
        tau_hat=tau,
        scheme_label=full_weights.provenance,
        se_bootstrap=float(np.std(est, ddof=1)),
        n_replicates=est.size,
        n_discarded=discarded,
        seed=seed,
        variance_inflation=variance_inflation_preview(full_weights),
        refit_per_replicate=refit,
        replicate_estimates=est if keep_replicates else None,
    )


def effect_by_decile(
    data: Dataset,
    model: PropensityModel,
    scheme: WeightScheme,
    n_bins: int = 10,
) -> tuple[DecileEffect, ...]:
    """Effect estimates within score deciles (or ``n_bins`` quantile bins).

    The global scheme's tilting function is restricted to each bin; bins
    missing one of the groups are flagged not-estimable rather than
    estimated.  Tied scores always land in the same bin.
    """
    if data.outcome is None:
        raise DataError("dataset has no outcome column; estimation needs one")
    score = model.score
    edges = np.unique(np.quantile(score, np.linspace(0.0, 1.0, n_bins + 1))[1:-1])
    edges = edges[(edges > score.min()) & (edges < score.max())]
    idx = np.searchsorted(edges, score, side="right")
    bounds = np.concatenate(([0.0], edges, [1.0]))

    ws = compute(model, data, scheme) if scheme.kind != "unweighted" else compute(
        np.full(data.n_units, 0.5), data, scheme
    )
    y = data.outcome
    z = data.treatment
    w = ws.raw_weight

    out = []
    for b in range(len(edges) + 1):
        mask = idx == b
        t = mask & (z == 1)
        c = mask & (z == 0)
        n1, n0 = int(t.sum()), int(c.sum())
        wt, wc = w[t].sum(), w[c].sum()
        estimable = n1 > 0 and n0 > 0 and wt > 0 and wc > 0
        tau = (
            float(np.sum(y[t] * w[t]) / wt - np.sum(y[c] * w[c]) / wc) if estimable else None
        )
        out.append(
            DecileEffect(
                index=b + 1,
                score_lower=float(bounds[b]),
                score_upper=float(bounds[b + 1]),
                n_treated=n1,
                n_control=n0,
                estimable=estimable,
                tau_hat=tau,
            )
        )
    return tuple(out)


def fixed_effects_oracle(data: Dataset) -> float:
    """Effect estimate from OLS with a fixed effect per design point.

    Groups units by identical covariate rows, excludes (with a warning)
    design points observed in only one group, and solves
    ``y = alpha_point + tau * z`` by the normal equations.  On such
    discrete designs this equals the overlap-weighted estimate under the
    saturated propensity model, which is what makes it useful as an
    independent cross-check.
    """
    if data.outcome is None:
        raise DataError("dataset has no outcome column; estimation needs one")
    _, inverse = np.unique(data.covariates, axis=0, return_inverse=True)
    z = data.treatment
    y = data.outcome

    n_points = int(inverse.max()) + 1
    keep_point = np.zeros(n_points, dtype=bool)
    for p in range(n_points):
        mask = inverse == p
        keep_point[p] = (z[mask] == 1).any() and (z[mask] == 0).any()
    if not keep_point.any():
        raise ValueError("no design point contains both groups; effect not identified")
    if not keep_point.all():
        warnings.warn(
            f"excluding {int((~keep_point).sum())} design point(s) observed in only one group"
        )

    units = keep_point[inverse]
    sub_inv = inverse[units]
    kept_ids = np.unique(sub_inv)
    remap = {pid: i for i, pid in enumerate(kept_ids)}
    a = np.array([remap[p] for p in sub_inv])
    zz = z[units].astype(float)
    yy = y[units]

    p = kept_ids.size
    design = np.zeros((zz.size, p + 1))
    design[np.arange(zz.size), a] = 1.0
    design[:, p] = zz
    coef = np.linalg.solve(design.T @ design, design.T @ yy)
    return float(coef[p])


def estimate_report_dict(report: EstimateReport) -> dict:
    out = {
        "scheme": report.scheme_label,
        "tau_hat": report.tau_hat,
        "se_bootstrap": report.se_bootstrap,
        "n_replicates": report.n_replicates,
        "n_discarded": report.n_discarded,
        "seed": report.seed,
        "variance_inflation": report.variance_inflation,
        "refit_per_replicate": report.refit_per_replicate,
    }
    if report.per_decile is not None:
        out["per_decile"] = [
            {
                "decile": d.index,
                "score_lower": d.score_lower,
                "score_upper": d.score_upper,
                "n_treated": d.n_treated,
                "n_control": d.n_control,
                "estimable": d.estimable,
                "tau_hat": d.tau_hat,
            }
            for d in report.per_decile
        ]
    return out
