"""Command-line interface: fit, predict, simulate, report.

Exit codes: 0 success, 2 usage or configuration problem, 3 data
problem, 4 numeric failure (non-convergence, singular systems, or a
resource guard). Worker count for simulations comes from the config or
the CROSSRE_WORKERS environment variable.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from scipy.stats import norm

from . import __version__
from .errors import ConfigError, DataError, NumericError, ResourceError
from .estimate import FixedEffects, fixed_effects_covariance
from .estimate import fit as fit_model
from .io import (
    design_from_cubes,
    ingest_csv,
    load_json,
    write_csv_rows,
    write_json,
)
from .kron import VarianceComponents
from .predict import blup_interaction, blup_no_interaction
from .simlab import ScenarioConfig, ScenarioResult, emit_table, run_scenario
from .uncertainty import kh_pr_mse, mse_lsw_all, prediction_interval

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossre",
        description="Crossed random effects: fitting, prediction, simulation.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    p_fit = sub.add_parser("fit", help="fit a model to a long-format CSV")
    p_fit.add_argument("--data", required=True, help="long-format CSV file")
    p_fit.add_argument("--roles", default=None,
                       help="covariate roles, e.g. 'speed=row,load=auto'")
    p_fit.add_argument("--method", choices=("reml", "ml"), default="reml")
    p_fit.add_argument("--standardize", action="store_true",
                       help="z-score covariate columns before fitting")
    p_fit.add_argument("--out", default="fit.json", help="output file")
    p_fit.set_defaults(func=cmd_fit)

    p_pred = sub.add_parser("predict",
                            help="EBLUPs, MSEs, and intervals from a fit")
    p_pred.add_argument("--fit", required=True, help="fit.json from the fit command")
    p_pred.add_argument("--data", default=None,
                        help="data CSV (default: the path recorded in the fit)")
    p_pred.add_argument("--mse", choices=("lsw", "kh", "pr"), default="lsw")
    p_pred.add_argument("--level", type=float, default=0.95,
                        help="interval coverage level")
    p_pred.add_argument("--out-dir", default=".", help="output directory")
    p_pred.set_defaults(func=cmd_predict)

    p_sim = sub.add_parser("simulate", help="run Monte Carlo scenarios")
    p_sim.add_argument("--config", required=True, help="scenario JSON file")
    p_sim.add_argument("--out", default=".", help="output directory")
    p_sim.add_argument("--seed", type=int, default=None,
                       help="override the seed of every scenario")
    p_sim.set_defaults(func=cmd_simulate)

    p_rep = sub.add_parser("report", help="tabulate simulation results")
    p_rep.add_argument("--in", dest="indir", required=True,
                       help="directory of scenario_*.json files")
    p_rep.add_argument("--format", choices=("text", "csv", "json"),
                       default="text")
    p_rep.set_defaults(func=cmd_report)
    return parser


# ---------------------------------------------------------------------------
# fit

def _standardized(ingest):
    cubes = {}
    for name, cube in ingest.covariates.items():
        sd = cube.std()
        if sd == 0:
            raise DataError(f"covariate {name!r} is constant; cannot z-score")
        cubes[name] = (cube - cube.mean()) / sd
    return design_from_cubes(ingest.layout, cubes, ingest.roles)


def cmd_fit(args) -> int:
    ingest = ingest_csv(args.data, roles=args.roles)
    design = _standardized(ingest) if args.standardize else ingest.design
    result = fit_model(design, ingest.table, method=args.method)

    cov = fixed_effects_covariance(result.theta, design)
    estimates = result.xi.vector()
    ses = np.sqrt(np.diag(cov))
    pvalues = 2.0 * (1.0 - norm.cdf(np.abs(estimates / ses)))
    theta = result.theta
    payload = {
        "layout": [design.layout.g, design.layout.h, design.layout.m],
        "data": str(args.data),
        "roles": {name: role for name, role in ingest.roles.items()},
        "standardize": bool(args.standardize),
        "method": result.method,
        "criterion": result.criterion,
        "converged": result.converged,
        "iterations": result.iterations,
        "boundary_flags": result.boundary_flags,
        "theta": {
            "sigma_a2": theta.sigma_a2,
            "sigma_b2": theta.sigma_b2,
            "sigma_g2": theta.sigma_g2,
            "sigma_e2": theta.sigma_e2,
        },
        "sigma": {
            "sigma_alpha": float(np.sqrt(theta.sigma_a2)),
            "sigma_beta": float(np.sqrt(theta.sigma_b2)),
            "sigma_gamma": float(np.sqrt(theta.sigma_g2)),
            "sigma_e": float(np.sqrt(theta.sigma_e2)),
        },
        "fixed_effects": [
            {
                "name": name,
                "estimate": float(est),
                "std_error": float(se),
                "p_value": float(p),
            }
            for name, est, se, p in zip(
                design.column_names, estimates, ses, pvalues
            )
        ],
    }
    write_json(args.out, payload, seed=None, config=vars(args))
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# predict

def _fit_payload(path) -> dict:
    payload = load_json(path)
    for key in ("layout", "theta", "fixed_effects", "data", "roles"):
        if key not in payload:
            raise DataError(f"{path} does not look like a fit file: missing {key!r}")
    return payload


def cmd_predict(args) -> int:
    payload = _fit_payload(args.fit)
    if not 0.0 < args.level < 1.0:
        raise ConfigError(f"--level must be in (0, 1), got {args.level}")
    q = 1.0 - args.level

    data_path = args.data or payload["data"]
    ingest = ingest_csv(data_path, roles=payload["roles"])
    design = _standardized(ingest) if payload.get("standardize") else ingest.design
    layout = design.layout
    if [layout.g, layout.h, layout.m] != list(payload["layout"]):
        raise DataError(
            f"data layout {layout.shape} does not match the fitted "
            f"layout {tuple(payload['layout'])}"
        )
    theta = VarianceComponents(**payload["theta"])
    stored = [row["estimate"] for row in payload["fixed_effects"]]
    xi = FixedEffects.from_vector(np.array(stored), design)

    if layout.m > 1:
        ebl = blup_interaction(theta, xi, design, ingest.table)
    else:
        ebl = blup_no_interaction(theta, xi, design, ingest.table)

    mses = mse_lsw_all(theta, design)
    methods = {"alpha": "lsw", "beta": "lsw", "gamma": "lsw"}
    if args.mse in ("kh", "pr"):
        targets = [("A", i) for i in range(layout.g)]
        targets += [("B", j) for j in range(layout.h)]
        dense = kh_pr_mse(theta, design, targets)
        pick = 1 if args.mse == "kh" else 2
        mses["alpha"] = np.array(
            [dense[("A", i)][pick] for i in range(layout.g)]
        )
        mses["beta"] = np.array(
            [dense[("B", j)][pick] for j in range(layout.h)]
        )
        methods["alpha"] = methods["beta"] = args.mse
        # interaction effects keep the leverage-based value; the dense
        # corrections are defined for row/column effects only

    outdir = Path(args.out_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    config = vars(args)

    rows = []
    series = {}
    for kind, labels, points, mse_vec in (
        ("alpha", ingest.row_labels, ebl.alpha, mses["alpha"]),
        ("beta", ingest.col_labels, ebl.beta, mses["beta"]),
    ):
        intervals = [
            prediction_interval(float(pt), float(ms), q, methods[kind])
            for pt, ms in zip(points, mse_vec)
        ]
        for label, pt, ms, iv in zip(labels, points, mse_vec, intervals):
            rows.append((kind, label, repr(float(pt)), repr(float(ms)),
                         methods[kind], repr(iv.lower), repr(iv.upper)))
        series[kind] = (np.asarray(points, dtype=float), intervals)
    if ebl.gamma is not None:
        value = float(mses["gamma"][0, 0])
        for i, rlab in enumerate(ingest.row_labels):
            for j, clab in enumerate(ingest.col_labels):
                pt = float(ebl.gamma[i, j])
                iv = prediction_interval(pt, value, q, "lsw")
                rows.append(("gamma", f"{rlab}:{clab}", repr(pt), repr(value),
                             "lsw", repr(iv.lower), repr(iv.upper)))

    write_csv_rows(
        outdir / "intervals.csv",
        ("effect", "label", "eblup", "mse", "method", "lower", "upper"),
        rows, config=config,
    )

    qq_rows = []
    for kind, (points, intervals) in series.items():
        order = np.argsort(points)
        count = points.size
        for rank, idx in enumerate(order, start=1):
            quantile = float(norm.ppf((rank - 0.5) / count))
            iv = intervals[idx]
            qq_rows.append((
                kind, rank, repr(quantile), repr(float(points[idx])),
                repr(iv.lower), repr(iv.upper),
            ))
    write_csv_rows(
        outdir / "qqplot.csv",
        ("effect", "rank", "normal_quantile", "eblup", "lower", "upper"),
        qq_rows, config=config,
    )

    report = {
        "fit": payload,
        "level": args.level,
        "mse_method": args.mse,
        "effects": {
            "alpha": [
                {"label": lab, "eblup": float(pt),
                 "mse": float(ms), "method": methods["alpha"]}
                for lab, pt, ms in zip(
                    ingest.row_labels, ebl.alpha, mses["alpha"]
                )
            ],
            "beta": [
                {"label": lab, "eblup": float(pt),
                 "mse": float(ms), "method": methods["beta"]}
                for lab, pt, ms in zip(
                    ingest.col_labels, ebl.beta, mses["beta"]
                )
            ],
        },
    }
    write_json(outdir / "report.json", report, config=config)
    print(f"wrote {outdir / 'intervals.csv'}, {outdir / 'qqplot.csv'}, "
          f"{outdir / 'report.json'}")
    return 0


# ---------------------------------------------------------------------------
# simulate / report

def _scenario_configs(raw) -> list:
    if isinstance(raw, dict) and "scenarios" in raw:
        raw = raw["scenarios"]
        if not isinstance(raw, list):
            raise ConfigError("/scenarios: expected a list")
    if isinstance(raw, dict):
        raw = [raw]
    if not isinstance(raw, list) or not raw:
        raise ConfigError("config must be a scenario object or a non-empty list")
    configs = []
    for idx, entry in enumerate(raw):
        try:
            configs.append(ScenarioConfig.from_dict(entry))
        except ConfigError as exc:
            raise ConfigError(f"/scenarios/{idx}: {exc}") from None
    return configs


def cmd_simulate(args) -> int:
    raw = load_json(args.config)
    configs = _scenario_configs(raw)
    if args.seed is not None:
        configs = [
            ScenarioConfig.from_dict({**c.to_dict(), "seed": args.seed})
            for c in configs
        ]
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)

    results = []
    for idx, config in enumerate(configs):
        result = run_scenario(config)
        results.append(result)
        write_json(
            outdir / f"scenario_{idx}.json",
            result.to_dict(),
            seed=config.seed,
            config=config.to_dict(),
        )
    (outdir / "table.txt").write_text(emit_table(results, "text"),
                                      encoding="utf-8")
    (outdir / "results.csv").write_text(emit_table(results, "csv"),
                                        encoding="utf-8")
    print(emit_table(results, "text"), end="")
    print(f"wrote {len(results)} scenario file(s) under {outdir}")
    return 0


def cmd_report(args) -> int:
    indir = Path(args.indir)
    if not indir.is_dir():
        raise DataError(f"{indir} is not a directory")
    paths = sorted(indir.glob("scenario_*.json"))
    results = []
    for path in paths:
        payload = load_json(path)
        payload.pop("provenance", None)
        results.append(ScenarioResult.from_dict(payload))
    print(emit_table(results, args.format), end="")
    return 0


# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, ResourceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
