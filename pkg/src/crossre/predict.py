"""Best linear unbiased prediction of the random effects.

The predictors act on residual averages of y - X xi. Because the
shrinkage matrix diagonalizes over the same strata as V, each predicted
effect is a short combination of its own residual average and the grand
average, weighted by eigenvalue reciprocals; nothing here forms an
n x n matrix. The same expressions cover the no-interaction model by
holding the interaction variance at zero, which collapses the pair
spectrum to its single-replicate form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .design import CenteredDesign
from .errors import ConfigError
from .estimate import FitResult, FixedEffects
from .kron import VarianceComponents, lambdas
from .layout import ResponseTable, averages

__all__ = [
    "Eblups",
    "blup_interaction",
    "blup_no_interaction",
    "eblup",
    "cell_effect",
]


@dataclass(frozen=True)
class Eblups:
    """Predicted random effects at a given parameter value.

    gamma is None for the no-interaction model.
    """

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray | None
    xi: FixedEffects
    theta: VarianceComponents


def _blup(theta: VarianceComponents, xi: FixedEffects,
          design: CenteredDesign, table: ResponseTable,
          with_gamma: bool) -> Eblups:
    layout = design.layout
    g, h, m = layout.shape
    residual = table.values - design.matrix @ xi.vector()
    avg = averages(residual, layout)
    spec = lambdas(theta, layout)
    l1, l2, l3, l4 = spec.lambda1, spec.lambda2, spec.lambda3, spec.lambda4

    r_row = avg.row
    r_col = avg.col
    r = avg.grand
    alpha = h * m * theta.sigma_a2 * (r_row / l2 - (1.0 / l2 - 1.0 / l4) * r)
    beta = g * m * theta.sigma_b2 * (r_col / l3 - (1.0 / l3 - 1.0 / l4) * r)

    gamma = None
    if with_gamma:
        r_cell = avg.cell
        gamma = m * theta.sigma_g2 * (
            r_cell / l1
            - (1.0 / l1 - 1.0 / l2) * r_row[:, None]
            - (1.0 / l1 - 1.0 / l3) * r_col[None, :]
            + (1.0 / l1 - 1.0 / l2 - 1.0 / l3 + 1.0 / l4) * r
        )
    return Eblups(alpha=alpha, beta=beta, gamma=gamma, xi=xi, theta=theta)


def blup_interaction(theta: VarianceComponents, xi: FixedEffects,
                     design: CenteredDesign, table: ResponseTable) -> Eblups:
    """Predict row, column, and interaction effects (replicated model)."""
    if design.layout.m == 1:
        raise ConfigError(
            "interaction effects need replicates; this layout has m = 1"
        )
    return _blup(theta, xi, design, table, with_gamma=True)


def blup_no_interaction(theta: VarianceComponents, xi: FixedEffects,
                        design: CenteredDesign, table: ResponseTable) -> Eblups:
    """Predict row and column effects in the single-observation model."""
    if theta.sigma_g2 != 0.0:
        raise ConfigError(
            "the no-interaction predictor requires sigma_g2 = 0, "
            f"got {theta.sigma_g2!r}"
        )
    return _blup(theta, xi, design, table, with_gamma=False)


def eblup(fit: FitResult, design: CenteredDesign, table: ResponseTable) -> Eblups:
    """Empirical BLUPs: the BLUP evaluated at the fitted parameters."""
    if design.layout.m > 1:
        return blup_interaction(fit.theta, fit.xi, design, table)
    return blup_no_interaction(fit.theta, fit.xi, design, table)


def cell_effect(eblups: Eblups, i: int, j: int) -> float:
    """Predicted combined effect alpha_i + beta_j (+ gamma_ij if present)."""
    g = eblups.alpha.shape[0]
    h = eblups.beta.shape[0]
    if not (0 <= i < g and 0 <= j < h):
        raise IndexError(f"cell ({i}, {j}) outside a {g} x {h} grid")
    total = float(eblups.alpha[i] + eblups.beta[j])
    if eblups.gamma is not None:
        total += float(eblups.gamma[i, j])
    return total
