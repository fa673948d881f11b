"""Propensity-score estimation by maximum-likelihood logistic regression.

The solver is Newton-Raphson with step-halving, run to tight tolerances:
the exact-balance property of overlap weights holds only at the exact
MLE, where the score equations

    sum_i Z_i = sum_i e_i        and        sum_i X_ik Z_i = sum_i X_ik e_i

are satisfied.  Convergence therefore requires the maximum score-equation
residual to fall below ``tol * n_units`` (default 1e-10 * N).

No regularization is applied by default; a ridge penalty is available but
breaks the score equations and with them exact balance, so it is flagged.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .dataset import DataError, Dataset

if TYPE_CHECKING:  # pragma: no cover
    from .weights import WeightedSample

logger = logging.getLogger(__name__)

__all__ = [
    "FitError",
    "PropensityModel",
    "CalibrationBin",
    "CalibrationReport",
    "fit",
    "calibrate",
    "variance_inflation_preview",
    "saturated_scores",
    "add_score_bin_indicators",
    "model_report",
]


class FitError(RuntimeError):
    """Raised when the likelihood optimization cannot produce a usable fit."""


def sigmoid(eta: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    out = np.empty_like(eta, dtype=float)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    ex = np.exp(eta[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _log_likelihood(eta: np.ndarray, z: np.ndarray) -> float:
    # sum z*eta - log(1 + exp(eta)), stable for large |eta|
    return float(np.sum(z * eta - np.logaddexp(0.0, eta)))


@dataclass(frozen=True)
class PropensityModel:
    """A fitted logistic propensity model.

    Attributes
    ----------
    coefficients : ndarray
        Intercept followed by one slope per retained covariate, on the
        original covariate scale.
    coefficient_names : tuple of str
        ``("intercept", <covariate names...>)``.
    linear_predictor : ndarray
        Per-unit eta_i = beta_0 + X_i beta'.
    score : ndarray
        Per-unit fitted propensity, exactly ``sigmoid(linear_predictor)``.
    converged : bool
        Whether the score-equation tolerance was met.
    iterations : int
        Newton iterations performed.
    max_score_residual : float
        Maximum absolute score-equation residual on the original design,
        i.e. max over the intercept and covariate equations.
    separation : bool
        True when the likelihood kept improving while the coefficient
        norm diverged, indicating a separating hyperplane.
    log_likelihood : float
        Binomial log-likelihood at the returned coefficients.
    ridge : float
        L2 penalty used (0 for the exact MLE). A positive value breaks
        the score equations and the exact-balance property.
    dropped_columns : tuple of str
        Constant columns removed before fitting.
    """

    coefficients: np.ndarray
    coefficient_names: tuple[str, ...]
    linear_predictor: np.ndarray
    score: np.ndarray
    converged: bool
    iterations: int
    max_score_residual: float
    separation: bool
    log_likelihood: float
    ridge: float = 0.0
    dropped_columns: tuple[str, ...] = ()


def fit(
    data: Dataset,
    *,
    max_iter: int = 100,
    tol: float = 1e-10,
    ll_tol: float = 1e-12,
    ridge: float = 0.0,
    separation_bound: float = 1e4,
) -> PropensityModel:
    """Fit ``logit Pr(Z=1|X) = beta_0 + X beta'`` by maximum likelihood.

    Covariates are standardized internally for solver conditioning;
    coefficients are reported on the original scale, and the fitted
    scores are invariant to affine rescaling of any covariate.

    Parameters
    ----------
    data : Dataset
        Sample with both groups non-empty.
    max_iter : int
        Newton iteration cap.
    tol : float
        Convergence when the max score residual < ``tol * n_units``.
    ll_tol : float
        Alternative stop on relative log-likelihood change.
    ridge : float
        Optional L2 penalty on the slopes. Nonzero values are flagged:
        penalized estimates do not satisfy the score equations, so the
        exact-balance property is lost.
    separation_bound : float
        Coefficient norm (standardized scale) beyond which the fit is
        declared separated and returned with a diagnostic.

    Raises
    ------
    FitError
        On a rank-deficient design or non-convergence without separation.
    """
    z = data.treatment.astype(float)
    n = data.n_units

    keep = [name for name in data.covariate_names if name not in data.constant_columns]
    dropped = tuple(name for name in data.covariate_names if name in data.constant_columns)
    if dropped:
        warnings.warn(f"dropping constant column(s) before fitting: {', '.join(dropped)}")
    x = np.column_stack([data.column(name) for name in keep]) if keep else np.empty((n, 0))
    k = x.shape[1]

    # standardize for conditioning; coefficients are mapped back afterwards
    mean = x.mean(axis=0) if k else np.empty(0)
    sd = x.std(axis=0) if k else np.empty(0)
    xs = (x - mean) / sd if k else x
    design = np.column_stack([np.ones(n), xs])

    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise FitError("design matrix is rank deficient after constant-column removal")

    if ridge > 0:
        warnings.warn(
            "ridge penalty breaks the score equations; exact balance of overlap weights is lost"
        )
    penalty = np.zeros(k + 1)
    penalty[1:] = ridge

    beta = np.zeros(k + 1)
    eta = design @ beta
    ll = _log_likelihood(eta, z) - 0.5 * float(penalty @ (beta * beta))
    separation = False
    converged = False
    stalls = 0
    it = 0

    for it in range(1, max_iter + 1):
        p = sigmoid(eta)
        grad = design.T @ (z - p) - penalty * beta
        if np.max(np.abs(grad)) < tol * n:
            converged = True
            break

        w = p * (1.0 - p)
        hess = design.T @ (design * w[:, None]) + np.diag(penalty)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            # Hessian numerically singular: fitted probabilities pinned at 0/1
            separation = True
            break

        # step-halving line search on the (penalized) log-likelihood
        t = 1.0
        accepted = False
        while t > 2.0**-40:
            cand = beta + t * step
            eta_c = design @ cand
            ll_c = _log_likelihood(eta_c, z) - 0.5 * float(penalty @ (cand * cand))
            if ll_c >= ll:
                accepted = True
                break
            t /= 2.0
        if not accepted:
            break  # no ascent at this precision; final gradient check decides

        improved = ll_c - ll
        beta, eta, ll = cand, eta_c, ll_c

        if np.max(np.abs(beta)) > separation_bound:
            separation = True
            break
        # relative log-likelihood change < ll_tol: stop once this repeats,
        # but only the gradient check can certify convergence
        stalls = stalls + 1 if improved <= ll_tol * (1.0 + abs(ll)) else 0
        if stalls >= 3:
            break

    p = sigmoid(eta)
    grad = design.T @ (z - p) - penalty * beta
    if not converged:
        converged = bool(np.max(np.abs(grad)) < tol * n)

    if separation:
        warnings.warn(
            "separation detected: some fitted probabilities are pinned near 0/1 "
            "while the likelihood still improves; scores are unreliable"
        )
    elif not converged:
        raise FitError(f"logistic fit did not converge within {max_iter} iterations")

    # map back to the original covariate scale
    coef = np.empty(k + 1)
    if k:
        coef[1:] = beta[1:] / sd
        coef[0] = beta[0] - float(np.sum(beta[1:] * mean / sd))
    else:
        coef[0] = beta[0]

    original_design = np.column_stack([np.ones(n), x])
    residual = float(np.max(np.abs(original_design.T @ (z - p))))

    return PropensityModel(
        coefficients=coef,
        coefficient_names=("intercept",) + tuple(keep),
        linear_predictor=eta,
        score=p,
        converged=bool(converged),
        iterations=it,
        max_score_residual=residual,
        separation=separation,
        log_likelihood=_log_likelihood(eta, z),
        ridge=ridge,
        dropped_columns=dropped,
    )


def saturated_scores(data: Dataset) -> np.ndarray:
    """Propensity scores of the saturated model, one parameter per design point.

    Units sharing an identical covariate row form a design point; the
    maximum-likelihood fitted probability there is the treated fraction
    n1 / (n0 + n1).  Points observed in only one group get scores of
    exactly 0 or 1, which zero out their overlap weights.
    """
    _, inverse = np.unique(data.covariates, axis=0, return_inverse=True)
    z = data.treatment.astype(float)
    totals = np.bincount(inverse)
    treated = np.bincount(inverse, weights=z)
    return (treated / totals)[inverse]


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationBin:
    lower: float
    upper: float
    n: int
    mean_score: float
    treated_fraction: float

    @property
    def gap(self) -> float:
        return abs(self.mean_score - self.treated_fraction)


@dataclass(frozen=True)
class CalibrationReport:
    """Predicted vs observed treatment rates in score-quantile bins."""

    bins: tuple[CalibrationBin, ...]
    max_abs_gap: float

    @property
    def n_units(self) -> int:
        return sum(b.n for b in self.bins)


def calibrate(model: PropensityModel, data: Dataset, n_bins: int = 10) -> CalibrationReport:
    """Compare mean predicted score with the observed treated fraction.

    Bins are formed from quantiles of the fitted scores (deciles for
    ``n_bins=10``).  When the scores have fewer distinct quantiles than
    requested, bins are merged with a warning.
    """
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    score = model.score
    z = data.treatment

    edges = np.quantile(score, np.linspace(0.0, 1.0, n_bins + 1))
    interior = np.unique(edges[1:-1])
    # strip interior edges equal to the extremes so every bin is non-empty
    interior = interior[(interior > score.min()) & (interior < score.max())]
    if len(interior) < n_bins - 1:
        warnings.warn(
            f"only {len(interior) + 1} distinct score bins available; merged from {n_bins}"
        )

    idx = np.searchsorted(interior, score, side="right")
    bins = []
    bounds = np.concatenate(([0.0], interior, [1.0]))
    for b in range(len(interior) + 1):
        mask = idx == b
        n = int(mask.sum())
        bins.append(
            CalibrationBin(
                lower=float(bounds[b]),
                upper=float(bounds[b + 1]),
                n=n,
                mean_score=float(score[mask].mean()),
                treated_fraction=float(z[mask].mean()),
            )
        )
    gap = max(b.gap for b in bins)
    return CalibrationReport(bins=tuple(bins), max_abs_gap=gap)


def add_score_bin_indicators(data: Dataset, model: PropensityModel, n_bins: int = 10) -> Dataset:
    """Append score-quantile-bin indicator columns for a recalibration refit.

    The first bin is the reference (no indicator), keeping the design
    full rank alongside the intercept.
    """
    edges = np.unique(np.quantile(model.score, np.linspace(0.0, 1.0, n_bins + 1))[1:-1])
    idx = np.searchsorted(edges, model.score, side="right")
    cols = []
    names = []
    for b in range(1, len(edges) + 1):
        cols.append((idx == b).astype(float))
        names.append(f"score_bin_{b + 1}")
    x = np.hstack([data.covariates, np.column_stack(cols)])
    return Dataset(
        treatment=data.treatment,
        covariates=x,
        covariate_names=data.covariate_names + tuple(names),
        outcome=data.outcome,
        sampling_weight=data.sampling_weight,
    )


# ---------------------------------------------------------------------------
# Design-effect preview
# ---------------------------------------------------------------------------

def variance_inflation_preview(weights: "WeightedSample") -> float:
    """Variance-inflation ratio of the weighted vs unweighted mean difference.

    Returns ``(1/n1 + 1/n0)^-1 * sum_z (sum_i w_zi^2) / (sum_i w_zi)^2``,
    the homoscedastic design-effect approximation.  Equals 1 exactly when
    the weights are constant within each group, and is >= 1 always.
    Usable before any outcome is loaded.
    """
    total = 0.0
    inv_n = 0.0
    for grp in (1, 0):
        w = weights.raw_weight[weights.treatment == grp]
        s = float(w.sum())
        if s <= 0:
            raise ValueError(f"zero total weight in group {grp}")
        total += float((w * w).sum()) / (s * s)
        inv_n += 1.0 / w.size
    return total / inv_n


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------

def model_report(model: PropensityModel, calibration: CalibrationReport | None = None) -> dict:
    """JSON-ready summary: coefficients, convergence diagnostics, calibration."""
    out = {
        "coefficients": {
            name: float(val) for name, val in zip(model.coefficient_names, model.coefficients)
        },
        "converged": model.converged,
        "iterations": model.iterations,
        "max_score_residual": model.max_score_residual,
        "separation": model.separation,
        "log_likelihood": model.log_likelihood,
        "ridge": model.ridge,
        "dropped_columns": list(model.dropped_columns),
        "score_range": [float(model.score.min()), float(model.score.max())],
    }
    if calibration is not None:
        out["calibration"] = {
            "max_abs_gap": calibration.max_abs_gap,
            "bins": [
                {
                    "lower": b.lower,
                    "upper": b.upper,
                    "n": b.n,
                    "mean_score": b.mean_score,
                    "treated_fraction": b.treated_fraction,
                }
                for b in calibration.bins
            ],
        }
    return out
