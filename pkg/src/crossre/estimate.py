"""Fixed-effect GLS and variance-component estimation.

Everything runs through per-stratum sufficient statistics. Because the
five strata are orthogonal eigenspaces of V, the generalized least
squares system, the residual quadratic form, and both likelihood-style
criteria are weighted combinations of

    A_s = (P_s X)' (P_s X),   b_s = (P_s X)' (P_s y),   c_s = |P_s y|^2

with weights 1/lambda_s. The statistics are computed once per dataset in
O(n p) and every criterion evaluation after that costs O(p^3), which is
what makes thousand-replicate studies cheap. The variance optimizer is
quasi-Newton over log variances with a boundary phase that pins
components collapsing to zero.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .design import CenteredDesign, dhat, _solve_block
from .errors import ConvergenceError, RankDeficiencyError
from .kron import VarianceComponents, lambdas
from .layout import BalancedLayout, ResponseTable

__all__ = [
    "FixedEffects",
    "FitResult",
    "gls_fixed_effects",
    "fixed_effects_covariance",
    "reml_criterion",
    "ml_criterion",
    "fit",
    "linear_approx_parameter_errors",
]


@dataclass(frozen=True)
class FixedEffects:
    """Intercept and slope blocks of the regression function.

    xi1 and xi2 are the row and column slopes. xi3 holds the slopes of
    the cell-level block (the interaction covariates when m > 1, the
    within-cell covariates when m = 1) and xi4 the replicate-level
    slopes, present only with m > 1.
    """

    xi0: float
    xi1: np.ndarray
    xi2: np.ndarray
    xi3: np.ndarray
    xi4: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate(
            [[self.xi0], self.xi1, self.xi2, self.xi3, self.xi4]
        )

    @classmethod
    def from_vector(cls, vec, design: CenteredDesign) -> "FixedEffects":
        vec = np.asarray(vec, dtype=float)
        p_a = design.x_row.shape[1]
        p_b = design.x_col.shape[1]
        p_c = design.x_cell.shape[2]
        p_w = design.x_obs.shape[3]
        splits = np.cumsum([1, p_a, p_b, p_c, p_w])
        if vec.shape != (splits[-1],):
            raise ValueError(
                f"coefficient vector of length {vec.size} does not match "
                f"design with {splits[-1]} columns"
            )
        parts = np.split(vec, splits[:-1])
        return cls(
            xi0=float(parts[0][0]), xi1=parts[1], xi2=parts[2],
            xi3=parts[3], xi4=parts[4],
        )


@dataclass(frozen=True)
class FitResult:
    """Outcome of a maximum likelihood or REML fit."""

    xi: FixedEffects
    theta: VarianceComponents
    criterion: float
    method: str
    converged: bool
    iterations: int
    boundary_flags: dict


@dataclass(frozen=True)
class StratumStats:
    """Sufficient statistics of (X, y) within each of the five strata."""

    layout: BalancedLayout
    a: np.ndarray  # (5, q, q)
    b: np.ndarray  # (5, q)
    c: np.ndarray  # (5,)
    var_y: float


def stratum_stats(design: CenteredDesign, table: ResponseTable) -> StratumStats:
    layout = design.layout
    g, h, m = layout.shape
    x = design.matrix
    q = x.shape[1]
    xy = np.hstack([x, table.values[:, None]])  # project X and y together

    cube = xy.reshape(g, h, m, q + 1)
    cell = cube.mean(axis=2)
    row = cell.mean(axis=1)
    col = cell.mean(axis=0)
    grand = row.mean(axis=0)

    within = cube - cell[:, :, None, :]
    inter = cell - row[:, None, :] - col[None, :, :] + grand

    # Inner products of projected columns; the broadcast factors account
    # for each cell/row/column value occupying m, hm, gm flat positions.
    gram = np.empty((5, q + 1, q + 1))
    gram[0] = np.tensordot(within, within, axes=([0, 1, 2], [0, 1, 2]))
    gram[1] = m * np.tensordot(inter, inter, axes=([0, 1], [0, 1]))
    rc = row - grand
    cc = col - grand
    gram[2] = h * m * rc.T @ rc
    gram[3] = g * m * cc.T @ cc
    gram[4] = layout.n * np.outer(grand, grand)

    y_all = table.values
    var_y = float(y_all.var()) if y_all.size else 0.0
    return StratumStats(
        layout=layout,
        a=gram[:, :q, :q],
        b=gram[:, :q, q],
        c=gram[:, q, q],
        var_y=var_y,
    )


def _profile(stats: StratumStats, theta: VarianceComponents):
    """GLS solution and criterion pieces at fixed variance components.

    Returns (xi_vec, quad, logdet_w, logdet_v) where quad is the
    V^{-1}-weighted residual sum of squares at the GLS solution and
    w = X' V^{-1} X.
    """
    spec = lambdas(theta, stats.layout)
    lam = spec.values
    inv_lam = 1.0 / lam
    w = np.tensordot(inv_lam, stats.a, axes=1)
    u = inv_lam @ stats.b
    sign, logdet_w = np.linalg.slogdet(w)
    if sign <= 0:
        raise RankDeficiencyError(
            "X' V^{-1} X is singular; the design has collinear columns"
        )
    xi_vec = np.linalg.solve(w, u)
    quad = float(inv_lam @ stats.c - u @ xi_vec)
    logdet_v = float(np.dot(spec.mults, np.log(lam)))
    return xi_vec, quad, logdet_w, logdet_v


def _criterion(stats: StratumStats, theta: VarianceComponents, method: str) -> float:
    xi_vec, quad, logdet_w, logdet_v = _profile(stats, theta)
    value = -0.5 * (logdet_v + quad)
    if method == "reml":
        value -= 0.5 * logdet_w
    return value


def gls_fixed_effects(
    theta: VarianceComponents, design: CenteredDesign, table: ResponseTable
) -> FixedEffects:
    """Generalized least squares coefficients at fixed variance components."""
    stats = stratum_stats(design, table)
    xi_vec, _, _, _ = _profile(stats, theta)
    return FixedEffects.from_vector(xi_vec, design)


def fixed_effects_covariance(
    theta: VarianceComponents, design: CenteredDesign
) -> np.ndarray:
    """(X' V^{-1} X)^{-1}, the GLS coefficient covariance at given theta."""
    zero_y = ResponseTable(design.layout, np.zeros(design.layout.n))
    stats = stratum_stats(design, zero_y)
    inv_lam = 1.0 / lambdas(theta, design.layout).values
    w = np.tensordot(inv_lam, stats.a, axes=1)
    sign, _ = np.linalg.slogdet(w)
    if sign <= 0:
        raise RankDeficiencyError(
            "X' V^{-1} X is singular; the design has collinear columns"
        )
    return np.linalg.inv(w)


def reml_criterion(
    theta: VarianceComponents, design: CenteredDesign, table: ResponseTable
) -> float:
    """Profiled REML criterion (larger is better), constants dropped."""
    return _criterion(stratum_stats(design, table), theta, "reml")


def ml_criterion(
    theta: VarianceComponents, design: CenteredDesign, table: ResponseTable
) -> float:
    """Profiled log-likelihood criterion (larger is better), constants dropped."""
    return _criterion(stratum_stats(design, table), theta, "ml")


# ---------------------------------------------------------------------------
# variance-component optimizer

_COMPONENTS = ("sigma_a2", "sigma_b2", "sigma_g2", "sigma_e2")
_GRAD_STEP = 1e-6
_PIN_FRACTION = 1e-12


def _grad_tol(criterion_value: float) -> float:
    # central differences carry noise of order eps * |f| / step, so the
    # attainable gradient norm grows with the criterion magnitude; the
    # floor reflects that near a stiff direction the remaining criterion
    # improvement falls below double-precision resolution while the
    # log-scale gradient is still ~1e-5 (theta is then within ~1e-5
    # relative of the stationary point, far tighter than fits need)
    return max(2e-5, 1e-8 * abs(criterion_value))


def _make_theta(values: dict) -> VarianceComponents:
    return VarianceComponents(
        sigma_a2=values.get("sigma_a2", 0.0),
        sigma_b2=values.get("sigma_b2", 0.0),
        sigma_g2=values.get("sigma_g2", 0.0),
        sigma_e2=values["sigma_e2"],
    )


def _start_values(stats: StratumStats) -> dict:
    """Moment-style starting values from the OLS residual stratum norms."""
    layout = stats.layout
    g, h, m = layout.shape
    a_tot = stats.a.sum(axis=0)
    b_tot = stats.b.sum(axis=0)
    xi0, *_ = np.linalg.lstsq(a_tot, b_tot, rcond=None)
    # |P_s r|^2 for the OLS residual r, per stratum.
    ss = stats.c - 2.0 * stats.b @ xi0 + np.einsum("i,sij,j->s", xi0, stats.a, xi0)
    ss = np.maximum(ss, 0.0)
    mult = lambdas(
        VarianceComponents(0.0, 0.0, 0.0, 1.0), layout
    ).mults.astype(float)
    msq = np.divide(ss, mult, out=np.zeros(5), where=mult > 0)

    floor = max(stats.var_y, 1.0) * 1e-4
    if m > 1:
        sigma_e2 = msq[0]
        sigma_g2 = (msq[1] - msq[0]) / m
    else:
        sigma_e2 = msq[1]
        sigma_g2 = 0.0
    start = {
        "sigma_e2": max(sigma_e2, floor),
        "sigma_a2": max((msq[2] - msq[1]) / (h * m), floor),
        "sigma_b2": max((msq[3] - msq[1]) / (g * m), floor),
    }
    if m > 1:
        start["sigma_g2"] = max(sigma_g2, floor)
    return start


def _optimize(stats: StratumStats, method: str, active: list, fixed: dict,
              start: dict, maxiter: int):
    """Quasi-Newton pass over log variances of the active components."""

    def theta_of(z):
        values = dict(fixed)
        values.update({name: float(np.exp(v)) for name, v in zip(active, z)})
        return _make_theta(values)

    def objective(z):
        return -_criterion(stats, theta_of(z), method)

    def gradient(z):
        grad = np.empty(len(z))
        for idx in range(len(z)):
            zp, zm = z.copy(), z.copy()
            zp[idx] += _GRAD_STEP
            zm[idx] -= _GRAD_STEP
            grad[idx] = (objective(zp) - objective(zm)) / (2.0 * _GRAD_STEP)
        return grad

    z0 = np.log([start[name] for name in active])
    with warnings.catch_warnings():
        # BFGS warns on line-search precision loss near flat regions; the
        # polish passes below decide whether the result is acceptable.
        warnings.simplefilter("ignore")
        res = optimize.minimize(
            objective, z0, jac=gradient, method="BFGS",
            options={"gtol": 1e-6, "maxiter": maxiter},
        )
        iterations = res.nit
        # a stalled line search can leave a gradient a few times above
        # tolerance that a simplex step plus a fresh quasi-Newton start
        # (identity Hessian, clean line-search state) removes
        for _ in range(2):
            if np.max(np.abs(gradient(res.x))) <= _grad_tol(res.fun):
                break
            polish = optimize.minimize(
                objective, res.x, method="Nelder-Mead",
                options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 4000},
            )
            iterations += polish.nit
            if polish.fun <= res.fun:
                res = polish
            restart = optimize.minimize(
                objective, res.x, jac=gradient, method="BFGS",
                options={"gtol": 1e-7, "maxiter": maxiter},
            )
            iterations += restart.nit
            if restart.fun <= res.fun:
                res = restart
    grad_inf = float(np.max(np.abs(gradient(res.x))))
    values = {name: float(np.exp(v)) for name, v in zip(active, res.x)}
    return values, -float(res.fun), grad_inf, iterations


def fit(
    design: CenteredDesign,
    table: ResponseTable,
    method: str = "reml",
    maxiter: int = 200,
    on_failure: str = "raise",
) -> FitResult:
    """Estimate variance components and fixed effects.

    method is "reml" or "ml". Components whose estimates collapse below
    1e-12 times the response variance are pinned to zero and flagged in
    boundary_flags. With on_failure="raise" a fit whose final gradient
    exceeds the tolerance raises ConvergenceError (carrying the best
    iterate as .best); on_failure="return" hands back the same result
    with converged=False.
    """
    if method not in ("reml", "ml"):
        raise ValueError(f"method must be 'reml' or 'ml', got {method!r}")
    if on_failure not in ("raise", "return"):
        raise ValueError(
            f"on_failure must be 'raise' or 'return', got {on_failure!r}"
        )
    layout = design.layout
    stats = stratum_stats(design, table)
    active = ["sigma_a2", "sigma_b2", "sigma_e2"]
    if layout.m > 1:
        active.insert(2, "sigma_g2")
    fixed = {} if layout.m > 1 else {"sigma_g2": 0.0}

    start = _start_values(stats)
    pin_at = max(stats.var_y, 1e-12) * _PIN_FRACTION
    iterations = 0
    for _ in range(len(active)):
        values, criterion, grad_inf, nit = _optimize(
            stats, method, active, fixed, start, maxiter
        )
        iterations += nit
        collapsed = [
            name for name in active
            if name != "sigma_e2" and values[name] < pin_at
        ]
        if not collapsed:
            break
        for name in collapsed:
            fixed[name] = 0.0
            active.remove(name)
        start = {name: values[name] for name in active}
    else:
        values, criterion, grad_inf, nit = _optimize(
            stats, method, active, fixed, start, maxiter
        )
        iterations += nit

    estimates = dict(fixed)
    estimates.update(values)
    theta = _make_theta(estimates)
    xi_vec, _, _, _ = _profile(stats, theta)
    boundary = {
        name: (name in fixed and layout.m > 1) if name == "sigma_g2"
        else name in fixed
        for name in _COMPONENTS[:3]
    }
    tol = _grad_tol(criterion)
    converged = grad_inf <= tol
    result = FitResult(
        xi=FixedEffects.from_vector(xi_vec, design),
        theta=theta,
        criterion=float(criterion),
        method=method,
        converged=converged,
        iterations=int(iterations),
        boundary_flags=boundary,
    )
    if not converged and on_failure == "raise":
        err = ConvergenceError(
            f"{method} fit stopped with gradient {grad_inf:.2e} > {tol:.1e} "
            f"after {iterations} iterations"
        )
        err.best = result
        raise err
    return result


# ---------------------------------------------------------------------------
# linear error approximations, for validation against simulated truth

def linear_approx_parameter_errors(
    design: CenteredDesign,
    effects: dict,
    theta_true: VarianceComponents,
    eta: float | None = None,
) -> dict:
    """Predicted estimator errors given the realized random effects.

    effects maps "alpha" to a g-vector, "beta" to an h-vector, "gamma"
    to a g x h matrix (only with m > 1), and "e" to the flat or cubed
    error array. Returns the first-order error predictions for every
    parameter: estimator minus truth, so that e.g. the "sigma_a2" entry
    approximates sigma_a2_hat - sigma_a2_true. eta controls the
    intercept rule: None or a finite positive value keeps both the row
    and column terms, 0 keeps only the row term, inf only the column
    term.
    """
    layout = design.layout
    g, h, m = layout.shape
    alpha = np.asarray(effects["alpha"], dtype=float)
    beta = np.asarray(effects["beta"], dtype=float)
    e = np.asarray(effects["e"], dtype=float).reshape(layout.shape)
    gamma = effects.get("gamma")

    d = dhat(design)
    out = {}

    def block_error(xc, eff, dmat, normalizer, name):
        if xc.shape[-1] == 0:
            return np.zeros(0)
        dinv = _solve_block(dmat, name)
        moments = np.tensordot(eff, xc, axes=(tuple(range(eff.ndim)),
                                              tuple(range(eff.ndim))))
        return dinv @ moments / normalizer

    out["xi1"] = block_error(design.row_c, alpha, d.d1, g, "row")
    out["xi2"] = block_error(design.col_c, beta, d.d2, h, "column")
    out["sigma_a2"] = float(np.mean(alpha**2) - theta_true.sigma_a2)
    out["sigma_b2"] = float(np.mean(beta**2) - theta_true.sigma_b2)

    if m > 1:
        if gamma is None:
            raise ValueError("gamma effects are required when m > 1")
        gamma = np.asarray(gamma, dtype=float)
        out["xi3"] = block_error(design.cell_c, gamma, d.d3, g * h, "cell")
        out["xi4"] = block_error(design.obs_c, e, d.d4, layout.n, "obs")
        out["sigma_g2"] = float(np.mean(gamma**2) - theta_true.sigma_g2)
    else:
        out["xi3"] = block_error(design.cell_c, e[:, :, 0], d.d3, g * h, "cell")
        out["xi4"] = np.zeros(0)
    out["sigma_e2"] = float(np.mean(e**2) - theta_true.sigma_e2)

    row_weight = np.ones(g)
    if design.row_c.shape[1]:
        dinv = _solve_block(d.d1, "row")
        row_weight = 1.0 - design.row_c @ (dinv @ design.xbar_row)
    col_weight = np.ones(h)
    if design.col_c.shape[1]:
        dinv = _solve_block(d.d2, "column")
        col_weight = 1.0 - design.col_c @ (dinv @ design.xbar_col)
    row_term = float(np.mean(row_weight * alpha))
    col_term = float(np.mean(col_weight * beta))
    if eta is None or (0.0 < eta < np.inf):
        out["xi0"] = row_term + col_term
    elif eta == 0.0:
        out["xi0"] = row_term
    elif np.isinf(eta):
        out["xi0"] = col_term
    else:
        raise ValueError(f"eta must be None, 0, a positive number, or inf, got {eta!r}")
    return out
