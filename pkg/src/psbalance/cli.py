"""Command-line front end.

One JSON config file drives a whole analysis so that results are
reproducible from a single artifact; individual fields can be overridden
with flags.  Subcommands:

    fit       fit the propensity model, write model report + calibration
    analyze   full pipeline: fit, weights, balance, estimates, comparison
    balance   balance diagnostics only (no outcome needed)
    weights   export per-unit weights only
    simulate  asymptotic relative-variance benchmark (scenario file)

Exit codes: 0 success, 2 configuration/data error, 3 numerical failure.
All outputs are UTF-8 CSV/JSON; JSON reports embed the resolved config.
The default output directory comes from --out, the config, or the
``PSBALANCE_OUT`` environment variable, in that order.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import asymptotics as asym
from .balance import asb, balance_report_dict, export_balance_csv, export_distributions_csv, weighted_distributions
from .dataset import DataError, Dataset, IngestionSchema, load
from .estimate import bootstrap_se, effect_by_decile, estimate_report_dict, wate, EstimateReport
from .propensity import FitError, calibrate, fit, model_report, variance_inflation_preview
from .weights import (
    EmptyTargetError,
    WeightScheme,
    combine_sampling_weights,
    compute,
    export_weights_csv,
    parse_scheme,
)

OUT_ENV_VAR = "PSBALANCE_OUT"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


@dataclass
class AnalysisConfig:
    """Resolved configuration for the data-driven commands."""

    data: Path
    schema: IngestionSchema
    schemes: tuple[WeightScheme, ...]
    replicates: int | None
    seed: int | None
    stratified: bool
    output_dir: Path
    calibration_bins: int
    truncation_alpha: float

    def resolved(self) -> dict:
        return {
            "data": str(self.data),
            "schema": self.schema.to_dict(),
            "schemes": [s.label for s in self.schemes],
            "bootstrap": (
                {"replicates": self.replicates, "seed": self.seed, "stratified": self.stratified}
                if self.replicates
                else None
            ),
            "output_dir": str(self.output_dir),
            "calibration_bins": self.calibration_bins,
            "truncation_alpha": self.truncation_alpha,
        }


def _load_config(args) -> AnalysisConfig:
    cfg_path = Path(args.config)
    if not cfg_path.exists():
        raise DataError(f"config file not found: {cfg_path}")
    with cfg_path.open(encoding="utf-8") as fh:
        raw = json.load(fh)

    data_path = Path(raw["data"])
    if not data_path.is_absolute():
        data_path = cfg_path.parent / data_path
    if not data_path.exists():
        raise DataError(f"data file not found: {data_path}")

    schema_obj = raw.get("schema")
    if isinstance(schema_obj, str):
        schema_path = cfg_path.parent / schema_obj
        if not schema_path.exists():
            raise DataError(f"schema file not found: {schema_path}")
        with schema_path.open(encoding="utf-8") as fh:
            schema_obj = json.load(fh)
    if not isinstance(schema_obj, dict):
        raise DataError("config must provide a 'schema' object or file path")
    schema = IngestionSchema.from_dict(schema_obj)

    alpha = float(getattr(args, "alpha", None) or raw.get("truncation_alpha", 0.1))

    scheme_strings = list(getattr(args, "scheme", None) or raw.get("schemes", []))
    if not scheme_strings:
        raise DataError("no weighting schemes configured (config 'schemes' or --scheme)")
    schemes = []
    for s in scheme_strings:
        if s.strip().lower() in ("truncated", "trunc"):
            schemes.append(WeightScheme.truncated(alpha))
        else:
            schemes.append(parse_scheme(s))

    boot = raw.get("bootstrap") or {}
    replicates = getattr(args, "replicates", None) or boot.get("replicates")
    seed = getattr(args, "seed", None)
    if seed is None:
        seed = boot.get("seed")
    if replicates is not None and seed is None:
        raise DataError("a seed is mandatory when the bootstrap is requested")

    out = getattr(args, "out", None) or raw.get("output_dir") or os.environ.get(OUT_ENV_VAR) or "."
    return AnalysisConfig(
        data=data_path,
        schema=schema,
        schemes=tuple(schemes),
        replicates=int(replicates) if replicates is not None else None,
        seed=int(seed) if seed is not None else None,
        stratified=bool(boot.get("stratified", False)),
        output_dir=Path(out),
        calibration_bins=int(raw.get("calibration_bins", 10)),
        truncation_alpha=alpha,
    )


class _Outputs:
    """Tracks written files so partial outputs can be removed on failure."""

    def __init__(self, directory: Path):
        self.dir = directory
        self.dir.mkdir(parents=True, exist_ok=True)
        self.created: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.dir / name
        self.created.append(p)
        return p

    def write_json(self, name: str, payload: dict) -> Path:
        p = self.path(name)
        with p.open("w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
        return p

    def discard(self, paths) -> None:
        for p in paths:
            p.unlink(missing_ok=True)
            if p in self.created:
                self.created.remove(p)

    def discard_all(self) -> None:
        self.discard(list(self.created))


def _slug(label: str) -> str:
    return "".join(c if c.isalnum() or c in "._-" else "_" for c in label).strip("_")


def _fit_with_report(cfg: AnalysisConfig, data: Dataset):
    model = fit(data)
    calib = calibrate(model, data, cfg.calibration_bins)
    report = model_report(model, calib)
    report["config"] = cfg.resolved()
    report["n_treated"] = data.n_treated
    report["n_control"] = data.n_control
    return model, calib, report


def _write_calibration_csv(calib, path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lower", "bin_upper", "n", "mean_score", "treated_fraction", "gap"])
        for b in calib.bins:
            writer.writerow(
                [repr(b.lower), repr(b.upper), b.n, repr(b.mean_score), repr(b.treated_fraction), repr(b.gap)]
            )


def cmd_fit(args) -> int:
    cfg = _load_config(args)
    out = _Outputs(cfg.output_dir)
    try:
        data = load(cfg.data, cfg.schema)
        model, calib, report = _fit_with_report(cfg, data)
        out.write_json("model_report.json", report)
        _write_calibration_csv(calib, out.path("calibration.csv"))
    except Exception:
        out.discard_all()
        raise
    print(f"model report written to {out.dir / 'model_report.json'}")
    if model.separation:
        print("warning: separation detected; see diagnostics in the report")
    return EXIT_OK


def _scheme_weights(model, data: Dataset, scheme: WeightScheme, schema: IngestionSchema):
    ws = compute(model, data, scheme)
    if schema.sampling_weight:
        ws = combine_sampling_weights(ws, data)
    return ws


def cmd_analyze(args) -> int:
    cfg = _load_config(args)
    if cfg.schema.outcome is None:
        raise DataError("analyze needs an outcome column in the schema")
    out = _Outputs(cfg.output_dir)
    try:
        data = load(cfg.data, cfg.schema)
        model, calib, report = _fit_with_report(cfg, data)
        out.write_json("model_report.json", report)
        _write_calibration_csv(calib, out.path("calibration.csv"))

        comparison = []
        for scheme in cfg.schemes:
            slug = _slug(scheme.label)
            scheme_files = []
            try:
                ws = _scheme_weights(model, data, scheme, cfg.schema)
                bal = asb(data, ws, model_covariates=model.coefficient_names[1:])
                p = out.path(f"balance_{slug}.csv")
                scheme_files.append(p)
                export_balance_csv(bal, p)

                if cfg.replicates:
                    est = bootstrap_se(
                        data,
                        scheme,
                        cfg.replicates,
                        cfg.seed,
                        stratified=cfg.stratified,
                    )
                else:
                    est = EstimateReport(
                        tau_hat=wate(data, ws),
                        scheme_label=ws.provenance,
                        se_bootstrap=float("nan"),
                        n_replicates=0,
                        n_discarded=0,
                        seed=cfg.seed if cfg.seed is not None else 0,
                        variance_inflation=variance_inflation_preview(ws),
                    )
                deciles = effect_by_decile(data, model, scheme)
                payload = estimate_report_dict(est)
                payload["per_decile"] = [
                    {
                        "decile": d.index,
                        "score_lower": d.score_lower,
                        "score_upper": d.score_upper,
                        "n_treated": d.n_treated,
                        "n_control": d.n_control,
                        "estimable": d.estimable,
                        "tau_hat": d.tau_hat,
                    }
                    for d in deciles
                ]
                payload["config"] = cfg.resolved()
                scheme_files.append(out.write_json(f"estimate_{slug}.json", payload))

                comparison.append(
                    {
                        "scheme": scheme.label,
                        "tau_hat": repr(est.tau_hat),
                        "se_bootstrap": "" if np.isnan(est.se_bootstrap) else repr(est.se_bootstrap),
                        "n_replicates": est.n_replicates,
                        "n_discarded": est.n_discarded,
                        "max_asb": repr(bal.max_asb),
                        "median_asb": repr(bal.median_asb),
                        "ess_treated": repr(ws.effective_sample_size(1)),
                        "ess_control": repr(ws.effective_sample_size(0)),
                        "variance_inflation": repr(est.variance_inflation),
                        "note": "",
                    }
                )
            except EmptyTargetError as exc:
                out.discard(scheme_files)
                comparison.append(
                    {
                        "scheme": scheme.label,
                        "tau_hat": "",
                        "se_bootstrap": "",
                        "n_replicates": "",
                        "n_discarded": "",
                        "max_asb": "",
                        "median_asb": "",
                        "ess_treated": "",
                        "ess_control": "",
                        "variance_inflation": "",
                        "note": str(exc),
                    }
                )

        fields = list(comparison[0].keys())
        with out.path("comparison.csv").open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            writer.writerows(comparison)
    except Exception:
        out.discard_all()
        raise
    print(f"analysis outputs written to {out.dir}")
    return EXIT_OK


def cmd_balance(args) -> int:
    cfg = _load_config(args)
    out = _Outputs(cfg.output_dir)
    try:
        data = load(cfg.data, cfg.schema)
        model, calib, report = _fit_with_report(cfg, data)
        out.write_json("model_report.json", report)
        for scheme in cfg.schemes:
            slug = _slug(scheme.label)
            ws = _scheme_weights(model, data, scheme, cfg.schema)
            bal = asb(data, ws, model_covariates=model.coefficient_names[1:])
            export_balance_csv(bal, out.path(f"balance_{slug}.csv"))
            payload = balance_report_dict(bal)
            payload["config"] = cfg.resolved()
            out.write_json(f"balance_{slug}.json", payload)
            export_distributions_csv(
                weighted_distributions(data, ws), out.path(f"distributions_{slug}.csv")
            )
    except Exception:
        out.discard_all()
        raise
    print(f"balance outputs written to {out.dir}")
    return EXIT_OK


def cmd_weights(args) -> int:
    cfg = _load_config(args)
    out = _Outputs(cfg.output_dir)
    try:
        data = load(cfg.data, cfg.schema)
        model = fit(data)
        for scheme in cfg.schemes:
            ws = _scheme_weights(model, data, scheme, cfg.schema)
            export_weights_csv(ws, out.path(f"weights_{_slug(scheme.label)}.csv"))
    except Exception:
        out.discard_all()
        raise
    print(f"weight exports written to {out.dir}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.scenarios:
        scenarios = asym.load_scenarios(args.scenarios)
    else:
        scenarios = asym.benchmark_scenarios()
    out_dir = Path(args.out or os.environ.get(OUT_ENV_VAR) or ".")
    out = _Outputs(out_dir)
    try:
        results = [asym.variance_table(spec) for spec in scenarios]
        mc = None
        if args.monte_carlo:
            if args.seed is None:
                raise DataError("a seed is mandatory when Monte Carlo simulation is requested")
            mc = {}
            for spec, res in zip(scenarios, results):
                for scheme, row in zip(spec.schemes, res.rows):
                    if row.diverged:
                        continue
                    mc[(res.scenario_label, row.scheme_label)] = asym.monte_carlo_check(
                        spec, scheme, args.mc_group_size, args.monte_carlo, args.seed
                    )
        asym.export_variance_csv(results, out.path("variance_benchmark.csv"), monte_carlo=mc)
    except Exception:
        out.discard_all()
        raise
    print(f"variance benchmark written to {out.dir / 'variance_benchmark.csv'}")
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="JSON analysis config")
    parser.add_argument("--out", help="output directory (overrides config and env)")
    parser.add_argument("--seed", type=int, help="bootstrap RNG seed override")
    parser.add_argument("--replicates", type=int, help="bootstrap replicate count override")
    parser.add_argument(
        "--scheme",
        action="append",
        help="weighting scheme (repeatable), e.g. overlap, ht, att, truncated:0.1",
    )
    parser.add_argument("--alpha", type=float, help="truncation alpha for bare 'truncated' schemes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="psbalance",
        description="Propensity-score balancing weights: fit, diagnose, estimate, benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit the propensity model and report calibration")
    _add_common(p_fit)
    p_fit.set_defaults(func=cmd_fit)

    p_an = sub.add_parser("analyze", help="full pipeline for every configured scheme")
    _add_common(p_an)
    p_an.set_defaults(func=cmd_analyze)

    p_bal = sub.add_parser("balance", help="balance diagnostics only")
    _add_common(p_bal)
    p_bal.set_defaults(func=cmd_balance)

    p_w = sub.add_parser("weights", help="export per-unit weights")
    _add_common(p_w)
    p_w.set_defaults(func=cmd_weights)

    p_sim = sub.add_parser("simulate", help="asymptotic variance benchmark")
    p_sim.add_argument("--scenarios", help="scenario JSON file (default: built-in benchmark)")
    p_sim.add_argument("--out", help="output directory")
    p_sim.add_argument("--seed", type=int, help="Monte Carlo seed")
    p_sim.add_argument("--monte-carlo", type=int, metavar="N_SIMS", help="add Monte Carlo columns")
    p_sim.add_argument("--mc-group-size", type=int, default=1000, help="treated units per simulation")
    p_sim.set_defaults(func=cmd_simulate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FitError, EmptyTargetError, np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
