"""Marginal covariance of the crossed model and its spectral structure.

The covariance of the response vector is

    V = sigma_a2 * Z1 Z1' + sigma_b2 * Z2 Z2' + sigma_g2 * Z3 Z3' + sigma_e2 * I

with Z1, Z2, Z3 the row, column, and cell membership matrices. In the
balanced design V has five eigenspaces, the images of the Kronecker
projectors built from C_a = I - J_a/a and Jbar_a = J_a/a:

    within       I (x) I (x) C_m          eigenvalue lambda0
    interaction  C_g (x) C_h (x) Jbar_m   eigenvalue lambda1
    row          C_g (x) Jbar_h (x) Jbar_m  eigenvalue lambda2
    column       Jbar_g (x) C_h (x) Jbar_m  eigenvalue lambda3
    grand        Jbar_g (x) Jbar_h (x) Jbar_m  eigenvalue lambda4

so V and V^{-1} act in O(n) through mean subtractions, and nothing here
ever materializes an n x n matrix except the explicitly guarded dense
helpers used by oracles and by the small-sample MSE machinery.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ResourceError
from .layout import BalancedLayout, _as_cube

__all__ = [
    "VarianceComponents",
    "LambdaSpectrum",
    "StratumDecomposition",
    "lambdas",
    "project_strata",
    "reconstruct",
    "apply_v",
    "apply_v_inv",
    "logdet_v",
    "dense_v",
    "z_blocks",
    "DENSE_GUARD",
]

# Largest n for which the dense helpers will materialize n x n matrices.
DENSE_GUARD = 5000


@dataclass(frozen=True)
class VarianceComponents:
    """Variances of the row, column, interaction, and error terms."""

    sigma_a2: float
    sigma_b2: float
    sigma_g2: float
    sigma_e2: float

    def __post_init__(self):
        for name in ("sigma_a2", "sigma_b2", "sigma_g2", "sigma_e2"):
            value = float(getattr(self, name))
            if not np.isfinite(value) or value < 0.0:
                raise ValueError(f"{name} must be finite and >= 0, got {value!r}")
            object.__setattr__(self, name, value)
        if self.sigma_e2 <= 0.0:
            raise ValueError(f"sigma_e2 must be positive, got {self.sigma_e2!r}")

    def replace(self, **kwargs) -> "VarianceComponents":
        fields = dict(
            sigma_a2=self.sigma_a2,
            sigma_b2=self.sigma_b2,
            sigma_g2=self.sigma_g2,
            sigma_e2=self.sigma_e2,
        )
        fields.update(kwargs)
        return VarianceComponents(**fields)


@dataclass(frozen=True)
class LambdaSpectrum:
    """Eigenvalues of V with their multiplicities, in stratum order
    (within, interaction, row, column, grand)."""

    lambda0: float
    lambda1: float
    lambda2: float
    lambda3: float
    lambda4: float
    mult0: int
    mult1: int
    mult2: int
    mult3: int
    mult4: int

    @property
    def values(self) -> np.ndarray:
        return np.array(
            [self.lambda0, self.lambda1, self.lambda2, self.lambda3, self.lambda4]
        )

    @property
    def mults(self) -> np.ndarray:
        return np.array(
            [self.mult0, self.mult1, self.mult2, self.mult3, self.mult4]
        )


@dataclass(frozen=True)
class StratumDecomposition:
    """Orthogonal split of an n-vector along the five eigenspaces.

    within holds the replicate residuals in flat order; interaction the
    double-centered cell means; row and col the centered marginal means;
    grand the overall mean. Broadcasting the five parts back over the
    layout and summing reconstructs the original vector exactly.
    """

    layout: BalancedLayout
    within: np.ndarray
    interaction: np.ndarray
    row: np.ndarray
    col: np.ndarray
    grand: float


def lambdas(theta: VarianceComponents, layout: BalancedLayout) -> LambdaSpectrum:
    """Eigenvalue spectrum of V for the given components and layout."""
    g, h, m = layout.g, layout.h, layout.m
    lam0 = theta.sigma_e2
    lam1 = theta.sigma_e2 + m * theta.sigma_g2
    lam2 = lam1 + h * m * theta.sigma_a2
    lam3 = lam1 + g * m * theta.sigma_b2
    lam4 = lam2 + lam3 - lam1
    return LambdaSpectrum(
        lambda0=lam0,
        lambda1=lam1,
        lambda2=lam2,
        lambda3=lam3,
        lambda4=lam4,
        mult0=g * h * (m - 1),
        mult1=(g - 1) * (h - 1),
        mult2=g - 1,
        mult3=h - 1,
        mult4=1,
    )


def project_strata(vec, layout: BalancedLayout) -> StratumDecomposition:
    """Split a vector into its five mutually orthogonal strata."""
    cube = _as_cube(vec, layout)
    cell = cube.mean(axis=2)
    row = cell.mean(axis=1)
    col = cell.mean(axis=0)
    grand = float(row.mean())
    within = (cube - cell[:, :, None]).reshape(layout.n)
    interaction = cell - row[:, None] - col[None, :] + grand
    return StratumDecomposition(
        layout=layout,
        within=within,
        interaction=interaction,
        row=row - grand,
        col=col - grand,
        grand=grand,
    )


def reconstruct(dec: StratumDecomposition) -> np.ndarray:
    """Sum the five strata back into a flat n-vector."""
    g, h, m = dec.layout.shape
    cell = dec.interaction + dec.row[:, None] + dec.col[None, :] + dec.grand
    return dec.within + np.repeat(cell.reshape(g * h), m)


def _weighted_strata(vec, layout: BalancedLayout, weights) -> np.ndarray:
    """Apply sum_s weights[s] * P_s to vec, where P_s are the projectors."""
    w0, w1, w2, w3, w4 = weights
    dec = project_strata(vec, layout)
    g, h, m = layout.shape
    cell = (
        w1 * dec.interaction
        + w2 * dec.row[:, None]
        + w3 * dec.col[None, :]
        + w4 * dec.grand
    )
    return w0 * dec.within + np.repeat(cell.reshape(g * h), m)


def apply_v(theta: VarianceComponents, layout: BalancedLayout, vec) -> np.ndarray:
    """Matrix-free product V(theta) @ vec."""
    return _weighted_strata(vec, layout, lambdas(theta, layout).values)


def apply_v_inv(theta: VarianceComponents, layout: BalancedLayout, vec) -> np.ndarray:
    """Matrix-free product V(theta)^{-1} @ vec."""
    lam = lambdas(theta, layout).values
    if np.any(lam <= 0.0):
        raise NumericError(f"covariance is singular: eigenvalues {lam}")
    return _weighted_strata(vec, layout, 1.0 / lam)


def logdet_v(theta: VarianceComponents, layout: BalancedLayout) -> float:
    """log det V(theta), summed over the spectrum with multiplicities."""
    spec = lambdas(theta, layout)
    return float(np.dot(spec.mults, np.log(spec.values)))


def _check_dense(layout: BalancedLayout, max_n: int) -> None:
    if layout.n > max_n:
        raise ResourceError(
            f"dense path refused for n={layout.n} (> {max_n}); "
            "use the matrix-free operations instead"
        )


def dense_v(
    theta: VarianceComponents, layout: BalancedLayout, max_n: int = DENSE_GUARD
) -> np.ndarray:
    """Materialize V(theta) as an n x n matrix. Guarded by max_n."""
    _check_dense(layout, max_n)
    g, h, m = layout.shape
    jg, jh, jm = (np.ones((a, a)) for a in (g, h, m))
    ig, ih = np.eye(g), np.eye(h)
    v = theta.sigma_a2 * np.kron(ig, np.kron(jh, jm))
    v += theta.sigma_b2 * np.kron(jg, np.kron(ih, jm))
    v += theta.sigma_g2 * np.kron(ig, np.kron(ih, jm))
    v += theta.sigma_e2 * np.eye(layout.n)
    return v


def z_blocks(
    layout: BalancedLayout, max_n: int = DENSE_GUARD
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Dense membership matrices (Z1, Z2, Z3) of shapes (n,g), (n,h), (n,gh)."""
    _check_dense(layout, max_n)
    g, h, m = layout.shape
    z1 = np.kron(np.eye(g), np.ones((h * m, 1)))
    z2 = np.kron(np.ones((g, 1)), np.kron(np.eye(h), np.ones((m, 1))))
    z3 = np.kron(np.eye(g * h), np.ones((m, 1)))
    return z1, z2, z3
