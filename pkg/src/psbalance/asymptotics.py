"""Large-sample variance of weighted effect estimators, by quadrature.

For two group densities ``f1`` and ``f0`` mixed with fractions
``q1 = 1/(1+r)`` and ``q0 = r/(1+r)`` (r = n0/n1), the implied propensity
score is ``e(x) = q1 f1(x) / (q1 f1(x) + q0 f0(x))``.  Under homoscedastic
residual variance v, the scaled asymptotic variance of the normalized
weighted estimator with tilting function h is

    N * Var -> v * I2 / I1**2,
    I2 = integral f(x) h(e(x))**2 / (e(x)(1 - e(x))) dx,
    I1 = integral f(x) h(e(x)) dx.

Dividing by the unweighted difference-of-means variance v*(1/q1 + 1/q0)
gives the relative variance this module reports.  Among all tilting
functions the overlap choice h = e(1-e) minimizes the variance (a
Cauchy-Schwarz argument), which :func:`optimality_scan` checks both by
comparing candidate schemes and by perturbing h around the optimum.

Inverse-probability-style integrands can genuinely diverge: whenever
h does not vanish fast enough where e approaches 0 or 1, the variance is
infinite.  The integrator detects growth toward the integration limits
and non-finite values, and reports such cells as ``inf`` with a note
rather than returning a range-dependent number.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import integrate

from .dataset import Dataset
from .propensity import fit as fit_propensity
from .weights import WeightScheme, compute, parse_scheme
from .estimate import wate

__all__ = [
    "NormalDensity",
    "TabulatedDensity",
    "ScenarioSpec",
    "SchemeVariance",
    "VarianceResult",
    "OptimalityScan",
    "MonteCarloCheck",
    "implied_propensity",
    "relative_variance",
    "variance_table",
    "optimality_scan",
    "monte_carlo_check",
    "benchmark_scenarios",
    "load_scenarios",
    "export_variance_csv",
]

DEFAULT_SCHEMES = (WeightScheme.ht(), WeightScheme.truncated(0.1), WeightScheme.overlap())


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormalDensity:
    mean: float
    sd: float

    def __post_init__(self):
        if self.sd <= 0:
            raise ValueError("sd must be positive")

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        z = (np.asarray(x, dtype=float) - self.mean) / self.sd
        return -0.5 * z * z - np.log(self.sd * np.sqrt(2.0 * np.pi))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.normal(self.mean, self.sd, size)

    @property
    def bounds(self) -> tuple[float, float]:
        return (self.mean - 10.0 * self.sd, self.mean + 10.0 * self.sd)

    @property
    def label(self) -> str:
        return f"N({self.mean:g},{self.sd:g}^2)"


@dataclass(frozen=True)
class TabulatedDensity:
    """Density given on a grid, linearly interpolated and normalized."""

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if g.ndim != 1 or g.size < 2 or (np.diff(g) <= 0).any():
            raise ValueError("grid must be strictly increasing with >= 2 points")
        if v.shape != g.shape or (v < 0).any() or not np.isfinite(v).all():
            raise ValueError("values must be finite, non-negative, one per grid point")
        total = np.trapz(v, g)
        if total <= 0:
            raise ValueError("density mass must be positive")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "values", v / total)

    def pdf(self, x: np.ndarray) -> np.ndarray:
        return np.interp(np.asarray(x, dtype=float), self.grid, self.values, left=0.0, right=0.0)

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.pdf(x))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        cdf = integrate.cumulative_trapezoid(self.values, self.grid, initial=0.0)
        cdf /= cdf[-1]
        return np.interp(rng.random(size), cdf, self.grid)

    @property
    def bounds(self) -> tuple[float, float]:
        return (float(self.grid[0]), float(self.grid[-1]))

    @property
    def label(self) -> str:
        return f"tabulated[{self.grid[0]:g},{self.grid[-1]:g}]"


Density = NormalDensity | TabulatedDensity


@dataclass(frozen=True)
class ScenarioSpec:
    """Two covariate densities, a size ratio, and the schemes to compare."""

    f1: Density
    f0: Density
    size_ratio: float = 1.0
    residual_variance: float = 1.0
    schemes: tuple[WeightScheme, ...] = DEFAULT_SCHEMES
    name: str = ""

    def __post_init__(self):
        if self.size_ratio <= 0:
            raise ValueError("size_ratio must be positive")
        if self.residual_variance <= 0:
            raise ValueError("residual_variance must be positive")

    @property
    def q1(self) -> float:
        return 1.0 / (1.0 + self.size_ratio)

    @property
    def q0(self) -> float:
        return self.size_ratio / (1.0 + self.size_ratio)

    @property
    def bounds(self) -> tuple[float, float]:
        b1, b0 = self.f1.bounds, self.f0.bounds
        return (min(b1[0], b0[0]), max(b1[1], b0[1]))

    @property
    def label(self) -> str:
        return self.name or f"{self.f1.label} vs {self.f0.label} (r={self.size_ratio:g})"


def _mixture_parts(spec: ScenarioSpec, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (f(x), e(x)) computed in log space to survive extreme tails."""
    x = np.asarray(x, dtype=float)
    la = np.log(spec.q1) + spec.f1.log_pdf(x)
    lb = np.log(spec.q0) + spec.f0.log_pdf(x)
    lf = np.logaddexp(la, lb)
    with np.errstate(invalid="ignore"):
        e = np.exp(la - lf)  # nan only where both densities vanish
    return np.exp(lf), e


def implied_propensity(spec: ScenarioSpec, x) -> np.ndarray:
    """Propensity score e(x) implied by the scenario's densities and ratio.

    ``e(x) = q1 f1(x) / (q1 f1(x) + q0 f0(x))``; defined wherever at
    least one density is positive.
    """
    arr = np.asarray(x, dtype=float)
    _, e = _mixture_parts(spec, arr)
    if np.isnan(e).any():
        raise ValueError("both densities vanish at some requested point")
    return e if arr.ndim else float(e)


# ---------------------------------------------------------------------------
# Quadrature with divergence detection
# ---------------------------------------------------------------------------

_SCAN_POINTS = 4097


def _integrate(fn, lo: float, hi: float, abs_tol: float) -> tuple[float, float, bool, str]:
    """Integrate fn over [lo, hi]; returns (value, error, diverged, note).

    A scan grid supplies breakpoints for the adaptive routine and powers
    the divergence check: non-finite values anywhere, or strict growth
    into either integration limit, mark the integral as divergent.
    """
    xs = np.linspace(lo, hi, _SCAN_POINTS)
    ys = fn(xs)
    if not np.all(np.isfinite(ys)):
        return np.inf, np.inf, True, "non-finite integrand values inside the range"
    floor = max(ys.max() * 1e-12, abs_tol)
    rising_right = ys[-1] > ys[-2] > ys[-3] and ys[-1] > floor
    rising_left = ys[0] > ys[1] > ys[2] and ys[0] > floor
    if rising_left or rising_right:
        side = "both limits" if rising_left and rising_right else (
            "the lower limit" if rising_left else "the upper limit"
        )
        return np.inf, np.inf, True, f"integrand grows toward {side}; integral diverges"

    turning = xs[1:-1][np.abs(np.diff(np.sign(np.diff(ys)))) > 0]
    pts = list(turning[:40]) or None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        value, err = integrate.quad(
            fn, lo, hi, limit=400, epsabs=abs_tol, epsrel=1e-10, points=pts
        )
    return float(value), float(err), False, ""


@dataclass(frozen=True)
class SchemeVariance:
    scheme_label: str
    relative_variance: float
    nvar: float                 # N * Var of the normalized weighted estimator
    quadrature_error: float
    diverged: bool
    note: str = ""


@dataclass(frozen=True)
class VarianceResult:
    scenario_label: str
    rows: tuple[SchemeVariance, ...]
    density_norm_error: float   # |integral of f - 1|


def _scheme_variance(spec: ScenarioSpec, scheme: WeightScheme, abs_tol: float) -> SchemeVariance:
    lo, hi = spec.bounds

    def g2(x):
        f, e = _mixture_parts(spec, x)
        h = scheme.tilt(np.nan_to_num(e, nan=0.5))
        denom = e * (1.0 - e)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(h == 0.0, 0.0, f * h * h / denom)
        # zero density contributes nothing even where e is undefined
        return np.where(f == 0.0, 0.0, out)

    def g1(x):
        f, e = _mixture_parts(spec, x)
        h = scheme.tilt(np.nan_to_num(e, nan=0.5))
        return f * h

    i2, err2, diverged, note = _integrate(g2, lo, hi, abs_tol)
    if diverged:
        return SchemeVariance(scheme.label, np.inf, np.inf, np.inf, True, note)
    i1, err1, d1, note1 = _integrate(g1, lo, hi, abs_tol * 1e-2)
    if d1 or i1 <= 0:
        raise ValueError(
            f"tilting function {scheme.label!r} has no mass on the scenario support"
        )
    nvar = spec.residual_variance * i2 / i1**2
    baseline = spec.residual_variance * (1.0 / spec.q1 + 1.0 / spec.q0)
    err = (err2 / i1**2 + 2.0 * i2 * err1 / i1**3) * spec.residual_variance
    return SchemeVariance(
        scheme_label=scheme.label,
        relative_variance=nvar / baseline,
        nvar=nvar,
        quadrature_error=err / baseline,
        diverged=False,
    )


def relative_variance(spec: ScenarioSpec, scheme: WeightScheme, *, abs_tol: float = 1e-9) -> float:
    """Asymptotic variance of the scheme's estimator relative to the
    unweighted difference of means; ``inf`` when the integral diverges."""
    return _scheme_variance(spec, scheme, abs_tol).relative_variance


def variance_table(
    spec: ScenarioSpec,
    schemes: tuple[WeightScheme, ...] | None = None,
    *,
    abs_tol: float = 1e-9,
) -> VarianceResult:
    """Relative variances for every scheme, plus a density normalization check."""
    schemes = spec.schemes if schemes is None else schemes
    lo, hi = spec.bounds

    def f_only(x):
        f, _ = _mixture_parts(spec, x)
        return f

    mass, _, _, _ = _integrate(f_only, lo, hi, abs_tol * 1e-2)
    rows = tuple(_scheme_variance(spec, s, abs_tol) for s in schemes)
    return VarianceResult(
        scenario_label=spec.label,
        rows=rows,
        density_norm_error=abs(mass - 1.0),
    )


# ---------------------------------------------------------------------------
# Overlap optimality
# ---------------------------------------------------------------------------

def _perturbed_overlap(eps: float, g) -> WeightScheme:
    def h(e):
        return e * (1.0 - e) * (1.0 + eps * g(e))

    return WeightScheme.custom(h, name=f"overlap*(1{eps:+g}*g)")


@dataclass(frozen=True)
class OptimalityScan:
    best: WeightScheme
    table: VarianceResult
    perturbations_checked: int
    perturbation_ok: bool
    min_perturbation_margin: float


def optimality_scan(
    spec: ScenarioSpec,
    candidates: tuple[WeightScheme, ...],
    *,
    eps: float = 0.05,
    perturbation_shapes=((lambda e: e - 0.5),),
    abs_tol: float = 1e-9,
) -> OptimalityScan:
    """Find the candidate with minimal relative variance and stress-test
    the overlap optimum against multiplicative perturbations of h.

    Each perturbation ``h = e(1-e) (1 + eps * g(e))`` with bounded g must
    not undercut the overlap variance beyond quadrature tolerance.
    """
    if not candidates:
        raise ValueError("candidate list is empty")
    table = variance_table(spec, tuple(candidates), abs_tol=abs_tol)
    best_i = int(np.argmin([r.relative_variance for r in table.rows]))
    best = list(candidates)[best_i]

    overlap_row = _scheme_variance(spec, WeightScheme.overlap(), abs_tol)
    min_margin = np.inf
    checked = 0
    ok = True
    for g in perturbation_shapes:
        for sign in (+1.0, -1.0):
            row = _scheme_variance(spec, _perturbed_overlap(sign * eps, g), abs_tol)
            checked += 1
            margin = row.nvar - overlap_row.nvar
            min_margin = min(min_margin, margin)
            slack = 10.0 * (row.quadrature_error + overlap_row.quadrature_error + abs_tol)
            if margin < -slack:
                ok = False
    return OptimalityScan(
        best=best,
        table=table,
        perturbations_checked=checked,
        perturbation_ok=ok,
        min_perturbation_margin=float(min_margin),
    )


# ---------------------------------------------------------------------------
# Monte Carlo cross-check
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MonteCarloCheck:
    ratio: float                # empirical N*Var over the asymptotic value
    empirical_nvar: float
    asymptotic_nvar: float
    n_sims: int
    n_failed: int


def monte_carlo_check(
    spec: ScenarioSpec,
    scheme: WeightScheme,
    n_per_group: int,
    n_sims: int,
    seed: int,
    *,
    fit_score: bool = True,
    effect: float = 1.0,
) -> MonteCarloCheck:
    """Simulate the estimator and compare its variance to the quadrature value.

    Draws ``n_per_group`` treated units from f1 and ``round(ratio *
    n_per_group)`` control units from f0, generates outcomes
    ``Y = effect * Z + noise`` with the scenario's residual variance,
    estimates the propensity score by a logistic fit in x (or uses the
    true score when ``fit_score=False``), and computes the weighted
    estimate.  Returns ``N * Var`` across simulations over the
    asymptotic integral; the effect size does not influence the ratio.

    Simulations that fail (e.g. a non-converging fit) are skipped and
    counted.  Replicate RNG streams derive from (seed, replicate index).
    """
    n1 = int(n_per_group)
    n0 = max(1, round(spec.size_ratio * n_per_group))
    n = n1 + n0
    sd_noise = float(np.sqrt(spec.residual_variance))
    asym = _scheme_variance(spec, scheme, 1e-9).nvar

    taus = []
    failed = 0
    z = np.concatenate([np.ones(n1), np.zeros(n0)])
    for r in range(n_sims):
        rng = np.random.default_rng((seed, r))
        x = np.concatenate([spec.f1.sample(rng, n1), spec.f0.sample(rng, n0)])
        y = effect * z + rng.normal(0.0, sd_noise, n)
        data = Dataset(
            treatment=z, covariates=x[:, None], covariate_names=("x",), outcome=y
        )
        try:
            if fit_score:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    score = fit_propensity(data).score
            else:
                score = implied_propensity(spec, x)
            taus.append(wate(data, compute(score, data, scheme)))
        except Exception:
            failed += 1
    if len(taus) < 2:
        raise RuntimeError("too few successful simulations to estimate a variance")

    emp = n * float(np.var(taus, ddof=1))
    return MonteCarloCheck(
        ratio=emp / asym,
        empirical_nvar=emp,
        asymptotic_nvar=asym,
        n_sims=len(taus),
        n_failed=failed,
    )


# ---------------------------------------------------------------------------
# Built-in benchmark and scenario files
# ---------------------------------------------------------------------------

def benchmark_scenarios() -> tuple[ScenarioSpec, ...]:
    """The four bundled normal-pair benchmark scenarios.

    Reference relative variances for these rows live in the acceptance
    test suite.  Row (4) pairs sd 1 with sd 10; its inverse-probability
    cell diverges (the integrand grows in the narrow group's tail), and
    is reported as ``inf``.
    """
    return (
        ScenarioSpec(NormalDensity(0, 1), NormalDensity(1, 1), 1.0, name="(1)"),
        ScenarioSpec(NormalDensity(0, 1), NormalDensity(2, 1), 1.0, name="(2)"),
        ScenarioSpec(NormalDensity(0, 1), NormalDensity(1, 1), 20.0, name="(3)"),
        ScenarioSpec(NormalDensity(0, 1), NormalDensity(0, 10), 1.0, name="(4)"),
    )


def _parse_density(obj) -> Density:
    if isinstance(obj, dict) and "normal" in obj:
        mu, sd = obj["normal"]
        return NormalDensity(float(mu), float(sd))
    if isinstance(obj, dict) and "tabulated" in obj:
        tab = obj["tabulated"]
        return TabulatedDensity(np.asarray(tab["grid"]), np.asarray(tab["values"]))
    raise ValueError(f"unrecognized density spec: {obj!r}")


def load_scenarios(path) -> tuple[ScenarioSpec, ...]:
    """Read scenario specs from a JSON file (a list of scenario objects)."""
    with Path(path).open(encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise ValueError("scenario file must contain a JSON list")
    out = []
    for i, obj in enumerate(raw):
        schemes = tuple(parse_scheme(s) for s in obj.get("schemes", ())) or DEFAULT_SCHEMES
        out.append(
            ScenarioSpec(
                f1=_parse_density(obj["f1"]),
                f0=_parse_density(obj["f0"]),
                size_ratio=float(obj.get("size_ratio", 1.0)),
                residual_variance=float(obj.get("residual_variance", 1.0)),
                schemes=schemes,
                name=obj.get("name", f"scenario_{i + 1}"),
            )
        )
    return tuple(out)


def export_variance_csv(results, path, monte_carlo: dict | None = None) -> None:
    """Write one row per (scenario, scheme) with the relative variance.

    ``monte_carlo`` optionally maps (scenario_label, scheme_label) to a
    :class:`MonteCarloCheck` whose columns are appended.
    """
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = ["scenario", "scheme", "relative_variance", "quadrature_error", "note"]
        if monte_carlo:
            header += ["mc_ratio", "mc_empirical_nvar", "mc_n_sims"]
        writer.writerow(header)
        for res in results:
            for row in res.rows:
                cells = [
                    res.scenario_label,
                    row.scheme_label,
                    "inf" if row.diverged else repr(row.relative_variance),
                    "" if row.diverged else repr(row.quadrature_error),
                    row.note,
                ]
                if monte_carlo:
                    mc = monte_carlo.get((res.scenario_label, row.scheme_label))
                    cells += (
                        [repr(mc.ratio), repr(mc.empirical_nvar), mc.n_sims] if mc else ["", "", ""]
                    )
                writer.writerow(cells)
