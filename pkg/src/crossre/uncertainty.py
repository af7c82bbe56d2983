"""Prediction MSE estimators and asymptotic interval machinery.

Three MSE estimators are offered. The leverage-based one ("lsw") is
closed form and cheap at any size. The other two ("kh", "pr") correct
for estimated variance components via the asymptotic covariance of the
variance estimator; both need a dense projection matrix and are guarded
to n <= 5000. Joint covariance matrices for pairs of EBLUP errors are
assembled from the same leverage quantities and come back on the
sqrt(g)-normalized scale with the practical eta = g/h, eta1 = g/m
substitutions already applied.

Derivative bookkeeping for the dense estimators orders the variance
components as (error, row, column[, interaction]); the interaction slot
exists only when m > 1.
"""

from __future__ import annotations

import threading
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .design import CenteredDesign, leverage_matrix
from .errors import ConfigError, RankDeficiencyError, ResourceError
from .estimate import FitResult
from .kron import (
    DENSE_GUARD,
    VarianceComponents,
    dense_v,
    lambdas,
    z_blocks,
)
from .layout import BalancedLayout, ResponseTable

__all__ = [
    "MseEstimate",
    "JointCovariance",
    "PredictionInterval",
    "mse_lsw",
    "mse_lsw_all",
    "mse_kh",
    "mse_pr",
    "mse_bundle",
    "kh_pr_mse",
    "trace_pair_matrix",
    "info_matrix_B",
    "eblup_gradient",
    "shrinkage_gradient",
    "joint_covariance",
    "prediction_interval",
]

_DENSE_LOCK = threading.Lock()  # bounds peak memory to one dense workspace


@dataclass(frozen=True)
class MseEstimate:
    """Estimated prediction MSE for one effect under up to three methods."""

    lsw: float
    kh: float | None
    pr: float | None
    target: tuple

    def __post_init__(self):
        if not (np.isfinite(self.lsw) and self.lsw >= 0):
            raise ValueError(f"lsw MSE must be finite and >= 0, got {self.lsw!r}")


@dataclass(frozen=True)
class JointCovariance:
    """Asymptotic covariance of a set of scaled EBLUP errors.

    matrix is on the sqrt(g)-normalized scale of the limit statements;
    normalization holds the divisor g that converts it to per-effect
    scale (see per_effect). targets labels the coordinates in order.
    """

    matrix: np.ndarray
    normalization: float
    targets: tuple

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=float)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise ValueError(f"covariance must be square, got shape {mat.shape}")
        if not np.allclose(mat, mat.T, atol=1e-10):
            raise ValueError("covariance matrix is not symmetric")
        scale = max(float(np.abs(mat).max()), 1.0)
        if np.linalg.eigvalsh(mat).min() < -1e-10 * scale:
            raise ValueError("covariance matrix is not positive semidefinite")

    @property
    def per_effect(self) -> np.ndarray:
        return self.matrix / self.normalization


@dataclass(frozen=True)
class PredictionInterval:
    """Normal-theory interval center +/- half_width at coverage level."""

    center: float
    half_width: float
    level: float
    method: str

    def __post_init__(self):
        if not 0.0 < self.level < 1.0:
            raise ValueError(f"level must be in (0, 1), got {self.level!r}")
        if not (np.isfinite(self.half_width) and self.half_width >= 0):
            raise ValueError(
                f"half_width must be finite and >= 0, got {self.half_width!r}"
            )

    @property
    def lower(self) -> float:
        return self.center - self.half_width

    @property
    def upper(self) -> float:
        return self.center + self.half_width

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper


# ---------------------------------------------------------------------------
# target handling

def _check_target(target, layout: BalancedLayout) -> tuple:
    g, h, _ = layout.shape
    if not isinstance(target, tuple) or len(target) != 2:
        raise ConfigError(
            "target must be a pair like ('A', i), ('B', j) or ('AB', (i, j)), "
            f"got {target!r}"
        )
    kind, index = target
    if kind == "A":
        if not (isinstance(index, (int, np.integer)) and 0 <= index < g):
            raise ConfigError(f"row index {index!r} outside 0..{g - 1}")
        return "A", int(index)
    if kind == "B":
        if not (isinstance(index, (int, np.integer)) and 0 <= index < h):
            raise ConfigError(f"column index {index!r} outside 0..{h - 1}")
        return "B", int(index)
    if kind == "AB":
        try:
            i, j = index
        except (TypeError, ValueError):
            raise ConfigError(
                f"interaction target needs an (i, j) pair, got {index!r}"
            ) from None
        if not (0 <= i < g and 0 <= j < h):
            raise ConfigError(f"cell ({i}, {j}) outside a {g} x {h} grid")
        return "AB", (int(i), int(j))
    raise ConfigError(f"target kind must be 'A', 'B' or 'AB', got {kind!r}")


def _theta_of(params) -> VarianceComponents:
    if isinstance(params, FitResult):
        return params.theta
    if isinstance(params, VarianceComponents):
        return params
    raise TypeError(
        f"expected a FitResult or VarianceComponents, got {type(params).__name__}"
    )


# ---------------------------------------------------------------------------
# leverage-based MSE

def _lsw_value(theta: VarianceComponents, design: CenteredDesign,
               kind: str, index) -> float:
    g, h, m = design.layout.shape
    if kind == "A":
        hub = leverage_matrix(design, "row")[index, index]
        top = theta.sigma_g2 if m > 1 else theta.sigma_e2
        return top / h + theta.sigma_a2 / g * hub
    if kind == "B":
        hub = leverage_matrix(design, "col")[index, index]
        top = theta.sigma_g2 if m > 1 else theta.sigma_e2
        return top / g + theta.sigma_b2 / h * hub
    if m == 1:
        raise ConfigError("interaction effects do not exist when m = 1")
    return theta.sigma_e2 / m + (1.0 / g + 1.0 / h) * theta.sigma_g2


def mse_lsw(params, design: CenteredDesign, target) -> float:
    """Leverage-based prediction MSE for one effect.

    For a row effect this is sigma_g2/h + (sigma_a2/g) H_ii with the
    row-block leverage H (sigma_e2 replacing sigma_g2 when m = 1);
    columns are symmetric; an interaction effect gets
    sigma_e2/m + (1/g + 1/h) sigma_g2. params is a FitResult or a
    VarianceComponents.
    """
    kind, index = _check_target(target, design.layout)
    return float(_lsw_value(_theta_of(params), design, kind, index))


def mse_lsw_all(params, design: CenteredDesign) -> dict:
    """Leverage-based MSEs for every effect at once.

    Returns {"alpha": (g,), "beta": (h,), "gamma": (g,h) or None}.
    """
    theta = _theta_of(params)
    g, h, m = design.layout.shape
    top = theta.sigma_g2 if m > 1 else theta.sigma_e2
    alpha = top / h + theta.sigma_a2 / g * np.diag(leverage_matrix(design, "row"))
    beta = top / g + theta.sigma_b2 / h * np.diag(leverage_matrix(design, "col"))
    gamma = None
    if m > 1:
        value = theta.sigma_e2 / m + (1.0 / g + 1.0 / h) * theta.sigma_g2
        gamma = np.full((g, h), value)
    return {"alpha": alpha, "beta": beta, "gamma": gamma}


# ---------------------------------------------------------------------------
# variance-estimator covariance

def _component_order(m: int) -> tuple:
    base = ("sigma_e2", "sigma_a2", "sigma_b2")
    return base + ("sigma_g2",) if m > 1 else base


def _dv_coefficients(layout: BalancedLayout) -> np.ndarray:
    """Stratum coefficients of each dV/d(component).

    Each derivative matrix is a combination of the five orthogonal
    projectors; row order matches _component_order.
    """
    g, h, m = layout.shape
    rows = [
        [1.0, 1.0, 1.0, 1.0, 1.0],               # error: identity
        [0.0, 0.0, h * m, 0.0, h * m],           # row block Z1 Z1'
        [0.0, 0.0, 0.0, g * m, g * m],           # column block Z2 Z2'
    ]
    if m > 1:
        rows.append([0.0, m, m, m, m])           # interaction block Z3 Z3'
    return np.array(rows)


def trace_pair_matrix(theta: VarianceComponents, layout: BalancedLayout) -> np.ndarray:
    """Matrix of traces tr(V^{-1} dV_s V^{-1} dV_t) in closed form."""
    spec = lambdas(theta, layout)
    coef = _dv_coefficients(layout)
    weights = spec.mults / spec.values**2
    return (coef * weights) @ coef.T


def info_matrix_B(theta, design: CenteredDesign | None = None,
                  layout: BalancedLayout | None = None) -> np.ndarray:
    """Asymptotic covariance of the variance-component estimator.

    Twice the inverse of the trace-pair matrix, ordered (error, row,
    column[, interaction]). The value depends only on theta and the
    layout; design is accepted for interface symmetry and used solely
    to supply the layout when none is given.
    """
    theta = _theta_of(theta)
    if layout is None:
        if design is None:
            raise ConfigError("info_matrix_B needs a design or a layout")
        layout = design.layout
    t = trace_pair_matrix(theta, layout)
    eigs = np.linalg.eigvalsh(t)
    if eigs.min() <= eigs.max() * 1e-12:
        raise RankDeficiencyError(
            "trace-pair matrix is singular; the layout cannot separate "
            "the variance components"
        )
    return 2.0 * np.linalg.inv(t)


# ---------------------------------------------------------------------------
# dense machinery shared by the kh and pr estimators

@dataclass(frozen=True)
class _DensePieces:
    layout: BalancedLayout
    v: np.ndarray
    vinv: np.ndarray
    proj: np.ndarray  # V^{-1} - V^{-1} X (X'V^{-1}X)^{-1} X'V^{-1}
    z1: np.ndarray
    z2: np.ndarray
    z3: np.ndarray


def _dense_pieces(theta: VarianceComponents, design: CenteredDesign,
                  max_n: int = DENSE_GUARD) -> _DensePieces:
    layout = design.layout
    if layout.n > max_n:
        raise ResourceError(
            f"kh/pr need dense n x n workspaces and n={layout.n} exceeds "
            f"the guard ({max_n}); use the lsw method instead"
        )
    with _DENSE_LOCK:
        v = dense_v(theta, layout, max_n)
        vinv = np.linalg.inv(v)
        x = design.matrix
        vx = vinv @ x
        w = x.T @ vx
        proj = vinv - vx @ np.linalg.solve(w, vx.T)
        z1, z2, z3 = z_blocks(layout, max_n)
    return _DensePieces(layout=layout, v=v, vinv=vinv, proj=proj,
                        z1=z1, z2=z2, z3=z3)


def _apply_dv(pieces: _DensePieces, s: int, vec: np.ndarray) -> np.ndarray:
    """dV_s @ vec without materializing the n x n derivative matrix."""
    if s == 0:
        return vec
    if s == 1:
        return pieces.z1 @ (pieces.z1.T @ vec)
    if s == 2:
        return pieces.z2 @ (pieces.z2.T @ vec)
    return pieces.z3 @ (pieces.z3.T @ vec)


def _dense_target(pieces: _DensePieces, theta: VarianceComponents, kind, index):
    """Indicator column, own variance, and own derivative slot for a target."""
    if kind == "A":
        return pieces.z1[:, index], theta.sigma_a2, 1
    if kind == "B":
        warnings.warn(
            "kh/pr for column effects extend the row-effect construction "
            "by symmetry and are experimental",
            stacklevel=3,
        )
        return pieces.z2[:, index], theta.sigma_b2, 2
    raise ConfigError("kh/pr estimators are not available for interaction effects")


def _target_terms(pieces: _DensePieces, theta: VarianceComponents,
                  kind: str, index):
    """(m1, A, C): base MSE plus the kh and pr sandwich matrices.

    A[s,t] covers the variability of the EBLUP's theta-gradient,
    C = Gamma V Gamma' that of the shrinkage weights; the corrections
    are tr(A B) and 2 tr(C B).
    """
    z, sigma2, own = _dense_target(pieces, theta, kind, index)
    d = 4 if pieces.layout.m > 1 else 3

    pz = pieces.proj @ z
    m1 = sigma2 - sigma2**2 * float(z @ pz)

    ell = np.empty((pieces.layout.n, d))
    for s in range(d):
        ell[:, s] = -sigma2 * (pieces.proj @ _apply_dv(pieces, s, pz))
    ell[:, own] += pz
    a_mat = ell.T @ pieces.v @ ell

    vz = pieces.vinv @ z
    gam = np.empty((pieces.layout.n, d))
    for s in range(d):
        gam[:, s] = -sigma2 * (pieces.vinv @ _apply_dv(pieces, s, vz))
    gam[:, own] += vz
    c_mat = gam.T @ pieces.v @ gam
    return m1, a_mat, c_mat


def mse_kh(fit, design: CenteredDesign, table: ResponseTable, target,
           max_n: int = DENSE_GUARD) -> float:
    """Prediction MSE with the gradient-variance correction.

    The estimate depends on the data only through the fitted
    parameters; table is part of the call shape shared with the other
    estimators. Guarded to n <= max_n.
    """
    del table
    theta = _theta_of(fit)
    kind, index = _check_target(target, design.layout)
    pieces = _dense_pieces(theta, design, max_n)
    m1, a_mat, _ = _target_terms(pieces, theta, kind, index)
    b = info_matrix_B(theta, layout=design.layout)
    return float(m1 + np.trace(a_mat @ b))


def mse_pr(fit, design: CenteredDesign, table: ResponseTable, target,
           max_n: int = DENSE_GUARD) -> float:
    """Prediction MSE with the doubled shrinkage-weight correction."""
    del table
    theta = _theta_of(fit)
    kind, index = _check_target(target, design.layout)
    pieces = _dense_pieces(theta, design, max_n)
    m1, _, c_mat = _target_terms(pieces, theta, kind, index)
    b = info_matrix_B(theta, layout=design.layout)
    return float(m1 + 2.0 * np.trace(c_mat @ b))


def kh_pr_mse(theta, design: CenteredDesign, targets,
              max_n: int = DENSE_GUARD) -> dict:
    """Both dense MSE estimates for several targets in one pass.

    Builds the n x n workspaces once and reuses them, which is what a
    replicated simulation needs. Returns {target: (m1, kh, pr)}.
    """
    theta = _theta_of(theta)
    checked = [_check_target(t, design.layout) for t in targets]
    pieces = _dense_pieces(theta, design, max_n)
    b = info_matrix_B(theta, layout=design.layout)
    out = {}
    for target, (kind, index) in zip(targets, checked):
        m1, a_mat, c_mat = _target_terms(pieces, theta, kind, index)
        out[target] = (
            float(m1),
            float(m1 + np.trace(a_mat @ b)),
            float(m1 + 2.0 * np.trace(c_mat @ b)),
        )
    return out


def mse_bundle(fit, design: CenteredDesign, table: ResponseTable, target,
               methods=("lsw",), max_n: int = DENSE_GUARD) -> MseEstimate:
    """MseEstimate with every requested method filled in."""
    methods = {m.lower() for m in methods}
    unknown = methods - {"lsw", "kh", "pr"}
    if unknown:
        raise ConfigError(f"unknown MSE methods: {sorted(unknown)}")
    kind, index = _check_target(target, design.layout)
    lsw = mse_lsw(fit, design, target)
    kh = pr = None
    if methods & {"kh", "pr"}:
        theta = _theta_of(fit)
        pieces = _dense_pieces(theta, design, max_n)
        m1, a_mat, c_mat = _target_terms(pieces, theta, kind, index)
        b = info_matrix_B(theta, layout=design.layout)
        if "kh" in methods:
            kh = float(m1 + np.trace(a_mat @ b))
        if "pr" in methods:
            pr = float(m1 + 2.0 * np.trace(c_mat @ b))
    return MseEstimate(lsw=lsw, kh=kh, pr=pr, target=(kind, index))


# ---------------------------------------------------------------------------
# derivative functionals, exposed for finite-difference validation

def eblup_gradient(theta, design: CenteredDesign, table: ResponseTable,
                   target, max_n: int = DENSE_GUARD) -> np.ndarray:
    """Gradient of the predicted effect in the variance components.

    Component order (error, row, column[, interaction]). Matches
    central finite differences of the BLUP at perturbed theta.
    """
    theta = _theta_of(theta)
    kind, index = _check_target(target, design.layout)
    pieces = _dense_pieces(theta, design, max_n)
    z, sigma2, own = _dense_target(pieces, theta, kind, index)
    d = 4 if pieces.layout.m > 1 else 3
    pz = pieces.proj @ z
    grad = np.empty(d)
    for s in range(d):
        ell = -sigma2 * (pieces.proj @ _apply_dv(pieces, s, pz))
        if s == own:
            ell = ell + pz
        grad[s] = ell @ table.values
    return grad


def shrinkage_gradient(theta, design: CenteredDesign, table: ResponseTable,
                       target, max_n: int = DENSE_GUARD) -> np.ndarray:
    """Gradient of sigma^2 z' V^{-1} y in the variance components.

    This is the fixed-coefficient functional behind the pr correction;
    component order as in eblup_gradient.
    """
    theta = _theta_of(theta)
    kind, index = _check_target(target, design.layout)
    pieces = _dense_pieces(theta, design, max_n)
    z, sigma2, own = _dense_target(pieces, theta, kind, index)
    d = 4 if pieces.layout.m > 1 else 3
    vz = pieces.vinv @ z
    grad = np.empty(d)
    for s in range(d):
        gam = -sigma2 * (pieces.vinv @ _apply_dv(pieces, s, vz))
        if s == own:
            gam = gam + vz
        grad[s] = gam @ table.values
    return grad


# ---------------------------------------------------------------------------
# joint covariance of EBLUP error pairs

def _pair(indices, count: int, what: str) -> tuple:
    try:
        s, u = indices
    except (TypeError, ValueError):
        raise ConfigError(
            f"{what} targets must be a pair of indices, got {indices!r}"
        ) from None
    if not (0 <= s < count and 0 <= u < count):
        raise ConfigError(f"{what} indices {indices!r} outside 0..{count - 1}")
    if s == u:
        raise ConfigError(
            f"{what} indices must be distinct, got {indices!r}; the limit "
            "statements require different levels"
        )
    return int(s), int(u)


def joint_covariance(params, design: CenteredDesign, targets,
                     model: str | None = None, cells: bool = False
                     ) -> JointCovariance:
    """Asymptotic joint covariance of EBLUP errors for two rows and columns.

    targets is ((s, u), (t, v)) with s != u and t != v. The matrix is on
    the sqrt(g)-normalized scale with eta = g/h and eta1 = g/m
    substituted; divide by the normalization (the field does it) for
    per-effect scale, whose diagonal equals the lsw MSEs. Coordinate
    order is (alpha_s, alpha_u, beta_t, beta_v) plus, with m > 1,
    (gamma_st, gamma_ut, gamma_sv, gamma_uv). With cells=True the
    matrix is instead the 2 x 2 covariance for the combined cell
    effects at (s, t) and (u, v).
    """
    theta = _theta_of(params)
    layout = design.layout
    g, h, m = layout.shape
    interaction = m > 1
    if model is not None:
        if model not in ("interaction", "no_interaction"):
            raise ConfigError(
                f"model must be 'interaction' or 'no_interaction', got {model!r}"
            )
        if (model == "interaction") != interaction:
            raise ConfigError(
                f"model {model!r} does not match a layout with m={m}"
            )
    try:
        row_pair, col_pair = targets
    except (TypeError, ValueError):
        raise ConfigError(
            f"targets must be ((s, u), (t, v)) index pairs, got {targets!r}"
        ) from None
    s, u = _pair(row_pair, g, "row")
    t, v = _pair(col_pair, h, "column")

    eta = g / h
    hrow = leverage_matrix(design, "row")[np.ix_((s, u), (s, u))]
    hcol = leverage_matrix(design, "col")[np.ix_((t, v), (t, v))]

    if cells:
        if interaction:
            eta1 = g / m
            mat = eta1 * theta.sigma_e2 * np.eye(2)
            mat += theta.sigma_a2 * hrow + eta * theta.sigma_b2 * hcol
        else:
            mat = (eta + 1.0) * theta.sigma_e2 * np.eye(2)
            mat += theta.sigma_a2 * hrow + eta * theta.sigma_b2 * hcol
        labels = (f"cell[{s},{t}]", f"cell[{u},{v}]")
        return JointCovariance(matrix=mat, normalization=float(g), targets=labels)

    top = theta.sigma_g2 if interaction else theta.sigma_e2
    f_blk = eta * top * np.eye(2) + theta.sigma_a2 * hrow
    g_blk = top * np.eye(2) + eta * theta.sigma_b2 * hcol
    labels = (f"alpha[{s}]", f"alpha[{u}]", f"beta[{t}]", f"beta[{v}]")

    if not interaction:
        mat = np.zeros((4, 4))
        mat[:2, :2] = f_blk
        mat[2:, 2:] = g_blk
        return JointCovariance(matrix=mat, normalization=float(g), targets=labels)

    sg2 = theta.sigma_g2
    upper = np.zeros((4, 4))
    upper[:2, :2] = f_blk
    upper[2:, 2:] = g_blk
    cross = -sg2 * np.array([
        [eta, 0.0, eta, 0.0],
        [0.0, eta, 0.0, eta],
        [1.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 1.0],
    ])
    q_blk = sg2 * np.array([
        [1.0 + eta, 1.0, eta, 0.0],
        [1.0, 1.0 + eta, 0.0, eta],
        [eta, 0.0, 1.0 + eta, 1.0],
        [0.0, eta, 1.0, 1.0 + eta],
    ])
    eta1 = g / m
    lower = eta1 * theta.sigma_e2 * np.eye(4) + q_blk
    mat = np.block([[upper, cross], [cross.T, lower]])
    labels = labels + (
        f"gamma[{s},{t}]", f"gamma[{u},{t}]", f"gamma[{s},{v}]", f"gamma[{u},{v}]",
    )
    return JointCovariance(matrix=mat, normalization=float(g), targets=labels)


# ---------------------------------------------------------------------------
# intervals

def prediction_interval(center: float, mse: float, q: float,
                        method: str = "lsw") -> PredictionInterval:
    """Two-sided normal interval center +/- Phi^{-1}(1-q/2) sqrt(mse)."""
    if not 0.0 < q < 1.0:
        raise ConfigError(f"q must be in (0, 1), got {q!r}")
    if not (np.isfinite(mse) and mse >= 0):
        raise ConfigError(f"mse must be finite and >= 0, got {mse!r}")
    half = float(norm.ppf(1.0 - q / 2.0) * np.sqrt(mse))
    return PredictionInterval(
        center=float(center), half_width=half, level=1.0 - q, method=method
    )
