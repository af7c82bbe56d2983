"""Monte Carlo study harness: generators, scenario runner, table output.

A scenario fixes a layout, true parameters, and effect distributions,
then repeatedly generates data, fits by REML, and checks whether the
prediction intervals cover the realized effects. Replicate RNG streams
are spawned from the master seed with one child per replicate, so
results are bit-identical for any worker count and any execution
order. Aggregation reports coverage, the relative interval length
(mean estimated root MSE against the mean absolute prediction error),
and Monte Carlo standard errors.
"""

from __future__ import annotations

import csv
import json
import os
import warnings
from dataclasses import dataclass, field
from io import StringIO

import numpy as np
from joblib import Parallel, delayed

from .design import CenteredDesign, build_centered_design, decompose_cell_covariate
from .errors import ConfigError, NumericError
from .estimate import fit
from .kron import VarianceComponents
from .layout import BalancedLayout, ResponseTable
from .predict import eblup
from .uncertainty import kh_pr_mse, mse_lsw, prediction_interval

__all__ = [
    "MixtureSpec",
    "ScenarioConfig",
    "CoverageCell",
    "ScenarioResult",
    "gen_covariate",
    "gen_effects",
    "gen_response",
    "scenario_design",
    "run_scenario",
    "emit_table",
    "worker_count",
]

WORKERS_ENV = "CROSSRE_WORKERS"

_COMPONENT_KEYS = ("alpha", "beta", "gamma", "e")
_METHODS = ("lsw", "kh", "pr")


@dataclass(frozen=True)
class MixtureSpec:
    """Two-part normal mixture with mean zero and a chosen variance.

    The first part is fixed at weight 0.3, mean 0.5, variance 1; the
    second part's mean makes the mixture mean zero and its variance is
    solved to hit the requested total.
    """

    weight1: float
    mean1: float
    var1: float
    weight2: float
    mean2: float
    var2: float

    @classmethod
    def for_variance(cls, sigma2: float) -> "MixtureSpec":
        w1, m1, v1 = 0.3, 0.5, 1.0
        w2 = 1.0 - w1
        m2 = -w1 * m1 / w2
        v2 = (sigma2 - w1 * (v1 + m1**2) - w2 * m2**2) / w2
        if v2 <= 0:
            raise ConfigError(
                f"mixture cannot reach variance {sigma2}; the fixed first "
                "part already contributes more"
            )
        return cls(weight1=w1, mean1=m1, var1=v1, weight2=w2, mean2=m2, var2=v2)

    @property
    def variance(self) -> float:
        mean = self.weight1 * self.mean1 + self.weight2 * self.mean2
        second = (
            self.weight1 * (self.var1 + self.mean1**2)
            + self.weight2 * (self.var2 + self.mean2**2)
        )
        return second - mean**2

    def draw(self, rng: np.random.Generator, size) -> np.ndarray:
        pick = rng.random(size) < self.weight1
        first = rng.normal(self.mean1, np.sqrt(self.var1), size)
        second = rng.normal(self.mean2, np.sqrt(self.var2), size)
        return np.where(pick, first, second)


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation scenario: layout, truth, distributions, run size."""

    layout: BalancedLayout
    xi: tuple
    theta: VarianceComponents
    distributions: dict = field(default_factory=dict)
    replicates: int = 1000
    seed: int = 0
    methods: tuple = ("lsw",)
    level: float = 0.05
    method: str = "reml"
    freeze_covariates: bool = False
    workers: int | None = None

    def __post_init__(self):
        m = self.layout.m
        want = 5 if m > 1 else 4
        if len(self.xi) != want:
            raise ConfigError(
                f"xi needs {want} entries for m={m} (intercept plus slopes), "
                f"got {len(self.xi)}"
            )
        if m == 1 and self.theta.sigma_g2 != 0.0:
            raise ConfigError("sigma_g2 must be 0 in a no-interaction scenario")
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        if not 0.0 < self.level < 1.0:
            raise ConfigError(f"level must be in (0, 1), got {self.level!r}")
        bad = set(self.distributions) - set(_COMPONENT_KEYS)
        if bad:
            raise ConfigError(f"unknown distribution keys: {sorted(bad)}")
        if m == 1 and "gamma" in self.distributions:
            raise ConfigError("no interaction effects to distribute when m = 1")
        for key, value in self.distributions.items():
            if value not in ("normal", "mixture"):
                raise ConfigError(
                    f"distribution for {key!r} must be 'normal' or 'mixture', "
                    f"got {value!r}"
                )
        unknown = set(self.methods) - set(_METHODS)
        if unknown:
            raise ConfigError(f"unknown MSE methods: {sorted(unknown)}")
        if self.method not in ("reml", "ml"):
            raise ConfigError(f"method must be 'reml' or 'ml', got {self.method!r}")

    def distribution(self, key: str) -> str:
        return self.distributions.get(key, "normal")

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"scenario config must be an object, got {type(data).__name__}")
        known = {
            "layout", "xi", "theta", "distributions", "replicates", "seed",
            "methods", "level", "method", "freeze_covariates", "workers",
        }
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        for key in ("layout", "xi", "theta"):
            if key not in data:
                raise ConfigError(f"config is missing required key {key!r}")
        try:
            g, h, m = (int(v) for v in data["layout"])
        except (TypeError, ValueError):
            raise ConfigError(
                f"layout must be [g, h, m] integers, got {data['layout']!r}"
            ) from None
        layout = BalancedLayout(g=g, h=h, m=m)
        theta = data["theta"]
        if isinstance(theta, dict):
            theta = VarianceComponents(
                sigma_a2=float(theta.get("sigma_a2", 0.0)),
                sigma_b2=float(theta.get("sigma_b2", 0.0)),
                sigma_g2=float(theta.get("sigma_g2", 0.0)),
                sigma_e2=float(theta["sigma_e2"]),
            )
        else:
            values = [float(v) for v in theta]
            if len(values) != 4:
                raise ConfigError(
                    "theta as a list must be [sigma_a2, sigma_b2, sigma_g2, "
                    f"sigma_e2], got {len(values)} entries"
                )
            theta = VarianceComponents(*values)
        return cls(
            layout=layout,
            xi=tuple(float(v) for v in data["xi"]),
            theta=theta,
            distributions=dict(data.get("distributions", {})),
            replicates=int(data.get("replicates", 1000)),
            seed=int(data.get("seed", 0)),
            methods=tuple(data.get("methods", ("lsw",))),
            level=float(data.get("level", 0.05)),
            method=data.get("method", "reml"),
            freeze_covariates=bool(data.get("freeze_covariates", False)),
            workers=None if data.get("workers") is None else int(data["workers"]),
        )

    def to_dict(self) -> dict:
        theta = self.theta
        return {
            "layout": [self.layout.g, self.layout.h, self.layout.m],
            "xi": list(self.xi),
            "theta": {
                "sigma_a2": theta.sigma_a2,
                "sigma_b2": theta.sigma_b2,
                "sigma_g2": theta.sigma_g2,
                "sigma_e2": theta.sigma_e2,
            },
            "distributions": dict(self.distributions),
            "replicates": self.replicates,
            "seed": self.seed,
            "methods": list(self.methods),
            "level": self.level,
            "method": self.method,
            "freeze_covariates": self.freeze_covariates,
            "workers": self.workers,
        }


@dataclass(frozen=True)
class CoverageCell:
    """Aggregated interval performance for one (target, method) pair.

    ``rmse_true`` is the quadratic mean of the realized prediction errors
    and ``abs_err_mean`` their mean absolute value. ``rlen`` is the
    relative excess of the mean estimated root MSE over ``abs_err_mean``;
    the benchmark tables this lab reproduces average the root of each
    squared error before comparing, which is the absolute-error mean.
    """

    target: str
    method: str
    coverage: float
    mc_se: float
    rlen: float
    rmse_true: float
    abs_err_mean: float
    rmse_mean: float

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "method": self.method,
            "coverage": self.coverage,
            "mc_se": self.mc_se,
            "rlen": self.rlen,
            "rmse_true": self.rmse_true,
            "abs_err_mean": self.abs_err_mean,
            "rmse_mean": self.rmse_mean,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CoverageCell":
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"malformed coverage cell: {exc}") from None


@dataclass(frozen=True)
class ScenarioResult:
    """All coverage cells of one scenario plus run bookkeeping."""

    config: ScenarioConfig
    cells: tuple
    replicates_used: int
    failures: int

    def cell(self, target: str, method: str) -> CoverageCell:
        for cell in self.cells:
            if cell.target == target and cell.method == method:
                return cell
        raise KeyError(f"no cell for target={target!r} method={method!r}")

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "cells": [cell.to_dict() for cell in self.cells],
            "replicates_used": self.replicates_used,
            "failures": self.failures,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioResult":
        for key in ("config", "cells", "replicates_used", "failures"):
            if key not in data:
                raise ConfigError(f"scenario result is missing key {key!r}")
        return cls(
            config=ScenarioConfig.from_dict(data["config"]),
            cells=tuple(CoverageCell.from_dict(c) for c in data["cells"]),
            replicates_used=int(data["replicates_used"]),
            failures=int(data["failures"]),
        )


# ---------------------------------------------------------------------------
# generators

def gen_covariate(layout: BalancedLayout, rng: np.random.Generator) -> np.ndarray:
    """Observation covariate 4 + t_i + 1.5 u_j + 2 v_ij (+ 3 w_ijk).

    All building blocks are independent standard normals. Returns a
    (g, h) array when m = 1, else (g, h, m).
    """
    g, h, m = layout.shape
    t = rng.standard_normal(g)
    u = rng.standard_normal(h)
    v = rng.standard_normal((g, h))
    x = 4.0 + t[:, None] + 1.5 * u[None, :] + 2.0 * v
    if m == 1:
        return x
    w = rng.standard_normal((g, h, m))
    return x[:, :, None] + 3.0 * w


def gen_effects(dist, count, variance: float, rng: np.random.Generator) -> np.ndarray:
    """iid effects with mean 0 and the requested variance.

    dist is "normal", "mixture", or a MixtureSpec (whose own variance
    then wins; passing variance too is a consistency check).
    """
    if isinstance(dist, MixtureSpec):
        if abs(dist.variance - variance) > 1e-8 * max(variance, 1.0):
            raise ConfigError(
                f"mixture variance {dist.variance} does not match the "
                f"requested {variance}"
            )
        return dist.draw(rng, count)
    if dist == "mixture":
        return MixtureSpec.for_variance(variance).draw(rng, count)
    if dist == "normal":
        return rng.normal(0.0, np.sqrt(variance), count)
    raise ConfigError(f"distribution must be 'normal', 'mixture', or a MixtureSpec, got {dist!r}")


def gen_response(config: ScenarioConfig, covariate, effects: dict,
                 layout: BalancedLayout) -> ResponseTable:
    """Responses from the centered covariate decomposition plus effects.

    The mean uses the decomposed covariate exactly: grand mean times
    intercept, centered row and column means, double-centered cell
    mean, and (with replicates) the within-cell residual.
    """
    g, h, m = layout.shape
    x = np.asarray(covariate, dtype=float)
    alpha = np.asarray(effects["alpha"], dtype=float)
    beta = np.asarray(effects["beta"], dtype=float)
    e = np.asarray(effects["e"], dtype=float).reshape(layout.shape)

    if m == 1:
        xi0, xi1, xi2, xi3 = config.xi
        row = x.mean(axis=1)
        col = x.mean(axis=0)
        grand = x.mean()
        mean = (
            grand * xi0
            + (row - grand)[:, None] * xi1
            + (col - grand)[None, :] * xi2
            + (x - row[:, None] - col[None, :] + grand) * xi3
        )
        y = mean + alpha[:, None] + beta[None, :] + e[:, :, 0]
        return ResponseTable(layout, y[:, :, None])

    xi0, xi1, xi2, xi3, xi4 = config.xi
    gamma = np.asarray(effects["gamma"], dtype=float)
    cell = x.mean(axis=2)
    row = cell.mean(axis=1)
    col = cell.mean(axis=0)
    grand = row.mean()
    cell_mean = (
        grand * xi0
        + (row - grand)[:, None] * xi1
        + (col - grand)[None, :] * xi2
        + (cell - row[:, None] - col[None, :] + grand) * xi3
    )
    y = (
        cell_mean[:, :, None]
        + (x - cell[:, :, None]) * xi4
        + alpha[:, None, None]
        + beta[None, :, None]
        + gamma[:, :, None]
        + e
    )
    return ResponseTable(layout, y)


def scenario_design(covariate, layout: BalancedLayout) -> CenteredDesign:
    """Design with the covariate split into its role-tagged parts."""
    parts = decompose_cell_covariate(covariate, layout)
    return build_centered_design(
        layout,
        x_row=parts["row"],
        x_col=parts["col"],
        x_cell=parts["cell"],
        x_obs=parts.get("obs"),
        names={
            "row": ["x_row"], "col": ["x_col"], "cell": ["x_cell"],
            "obs": ["x_obs"] if layout.m > 1 else [],
        },
    )


# ---------------------------------------------------------------------------
# scenario runner

def worker_count(requested: int | None = None) -> int:
    """Worker pool size: explicit request, else env var, else cpu count."""
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(
                f"{WORKERS_ENV} must be an integer, got {env!r}"
            ) from None
    return os.cpu_count() or 1


def _draw_effects(config: ScenarioConfig, rng: np.random.Generator) -> dict:
    layout = config.layout
    theta = config.theta
    effects = {
        "alpha": gen_effects(config.distribution("alpha"), layout.g,
                             theta.sigma_a2, rng),
        "beta": gen_effects(config.distribution("beta"), layout.h,
                            theta.sigma_b2, rng),
    }
    if layout.m > 1:
        effects["gamma"] = gen_effects(
            config.distribution("gamma"), layout.g * layout.h,
            theta.sigma_g2, rng,
        ).reshape(layout.g, layout.h)
    effects["e"] = gen_effects(
        config.distribution("e"), layout.n, theta.sigma_e2, rng,
    )
    return effects


def _targets(layout: BalancedLayout) -> list:
    targets = [("alpha[0]", ("A", 0)), ("beta[0]", ("B", 0))]
    if layout.m > 1:
        targets.append(("gamma[0,0]", ("AB", (0, 0))))
    return targets


def _replicate(config: ScenarioConfig, child: np.random.SeedSequence,
               frozen_covariate) -> dict | None:
    """One generate-fit-predict pass; None when the fit fails."""
    layout = config.layout
    rng = np.random.default_rng(child)
    if frozen_covariate is None:
        covariate = gen_covariate(layout, rng)
    else:
        covariate = frozen_covariate
    effects = _draw_effects(config, rng)
    table = gen_response(config, covariate, effects, layout)
    design = scenario_design(covariate, layout)
    try:
        result = fit(design, table, method=config.method, on_failure="return")
    except NumericError:
        return None
    if not result.converged:
        return None

    predictions = eblup(result, design, table)
    realized = {
        "alpha[0]": float(effects["alpha"][0]),
        "beta[0]": float(effects["beta"][0]),
    }
    points = {
        "alpha[0]": float(predictions.alpha[0]),
        "beta[0]": float(predictions.beta[0]),
    }
    if layout.m > 1:
        realized["gamma[0,0]"] = float(effects["gamma"][0, 0])
        points["gamma[0,0]"] = float(predictions.gamma[0, 0])

    dense_methods = [m for m in config.methods if m in ("kh", "pr")]
    dense = {}
    if dense_methods:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # column targets are flagged experimental
            dense = kh_pr_mse(
                result.theta, design,
                [("A", 0), ("B", 0)],
            )

    record = {}
    for label, target in _targets(layout):
        mses = {}
        if "lsw" in config.methods or target[0] == "AB":
            mses["lsw"] = mse_lsw(result, design, target)
        if target[0] != "AB":
            if "kh" in dense_methods:
                mses["kh"] = dense[target][1]
            if "pr" in dense_methods:
                mses["pr"] = dense[target][2]
        entry = {}
        for method, mse in mses.items():
            interval = prediction_interval(points[label], mse, config.level, method)
            entry[method] = (interval.covers(realized[label]), np.sqrt(mse))
        record[label] = {
            "error": points[label] - realized[label],
            "methods": entry,
        }
    return record


def run_scenario(config: ScenarioConfig) -> ScenarioResult:
    """Run all replicates of a scenario and aggregate interval metrics.

    Failed fits are excluded and counted; a scenario with more than 1%
    failures carries a warning. Results are reproducible for any worker
    count because each replicate owns a spawned RNG stream.
    """
    layout = config.layout
    children = np.random.SeedSequence(config.seed).spawn(config.replicates + 1)
    frozen = None
    if config.freeze_covariates:
        frozen = gen_covariate(layout, np.random.default_rng(children[-1]))

    jobs = worker_count(config.workers)
    records = Parallel(n_jobs=jobs)(
        delayed(_replicate)(config, child, frozen)
        for child in children[:-1]
    )
    kept = [r for r in records if r is not None]
    failures = config.replicates - len(kept)
    if not kept:
        raise NumericError(
            f"all {config.replicates} replicates failed to fit; the scenario "
            "produced no usable results"
        )
    if failures > 0.01 * config.replicates:
        warnings.warn(
            f"{failures} of {config.replicates} replicates failed to fit "
            "and were excluded",
            stacklevel=2,
        )

    cells = []
    for label, target in _targets(layout):
        errors = np.array([r[label]["error"] for r in kept])
        rmse_true = float(np.sqrt(np.mean(errors**2)))
        abs_err_mean = float(np.mean(np.abs(errors)))
        methods = ["lsw"] if target[0] == "AB" else list(config.methods)
        for method in methods:
            if method not in kept[0][label]["methods"]:
                continue
            hits = np.array(
                [r[label]["methods"][method][0] for r in kept], dtype=float
            )
            roots = np.array([r[label]["methods"][method][1] for r in kept])
            coverage = float(hits.mean())
            cells.append(CoverageCell(
                target=label,
                method=method,
                coverage=coverage,
                mc_se=float(np.sqrt(coverage * (1.0 - coverage) / hits.size)),
                rlen=float((roots.mean() - abs_err_mean) / abs_err_mean),
                rmse_true=rmse_true,
                abs_err_mean=abs_err_mean,
                rmse_mean=float(roots.mean()),
            ))
    return ScenarioResult(
        config=config,
        cells=tuple(cells),
        replicates_used=len(kept),
        failures=failures,
    )


# ---------------------------------------------------------------------------
# table emission

_COLUMNS = ("g", "h", "m", "target", "method", "coverage", "mc_se",
            "rlen", "rmse_true", "abs_err_mean", "rmse_mean",
            "replicates", "failures")


def _rows(results) -> list:
    rows = []
    for result in results:
        layout = result.config.layout
        for cell in result.cells:
            rows.append((
                layout.g, layout.h, layout.m, cell.target, cell.method,
                f"{cell.coverage:.3f}", f"{cell.mc_se:.3f}",
                f"{cell.rlen:.3f}", f"{cell.rmse_true:.4f}",
                f"{cell.abs_err_mean:.4f}", f"{cell.rmse_mean:.4f}",
                result.replicates_used, result.failures,
            ))
    return rows


def emit_table(results, format: str = "text") -> str:
    """Render scenario results as aligned text, CSV, or JSON.

    Output is deterministic for deterministic results; text and CSV end
    with a footer noting the coverage MC standard error formula.
    """
    if isinstance(results, ScenarioResult):
        results = [results]
    results = list(results)
    footer = (
        "coverage MC standard error = sqrt(coverage * (1 - coverage) / "
        "replicates), about 0.005 at coverage 0.95 with 1000 replicates"
    )

    if format == "json":
        return json.dumps(
            {
                "results": [r.to_dict() for r in results],
                "notes": [footer],
            },
            indent=2,
            sort_keys=True,
        )

    rows = _rows(results)
    if format == "csv":
        buf = StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(_COLUMNS)
        writer.writerows(rows)
        buf.write(f"# {footer}\n")
        return buf.getvalue()

    if format != "text":
        raise ConfigError(f"format must be 'text', 'csv', or 'json', got {format!r}")

    table = [tuple(str(v) for v in _COLUMNS)]
    table += [tuple(str(v) for v in row) for row in rows]
    widths = [max(len(row[c]) for row in table) for c in range(len(_COLUMNS))]
    lines = [
        "  ".join(value.ljust(width) for value, width in zip(row, widths)).rstrip()
        for row in table
    ]
    lines.append("")
    lines.append(footer)
    return "\n".join(lines) + "\n"
