"""Covariate bookkeeping for the crossed model.

Covariates enter in role-tagged blocks that vary along different margins
of the layout:

    row      one vector per row level i          shape (g, p_a)
    col      one vector per column level j       shape (h, p_b)
    cell     one vector per cell (i, j)          shape (g, h, p_cell)
    obs      one vector per observation          shape (g, h, m, p_w)

With replicates (m > 1) the cell block is the interaction role and the
obs block the within role. Without replicates (m = 1) the cell block
itself takes the within role and no obs block is allowed. Each block is
centered along its own margin: row and column blocks lose their means,
cell blocks are double-centered, obs blocks lose their cell means. The
centered blocks feed the per-block cross-product matrices and the
leverage terms that drive prediction error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, RankDeficiencyError
from .layout import BalancedLayout, center_two_way

__all__ = [
    "CovariateRoles",
    "CenteredDesign",
    "DhatMatrices",
    "build_centered_design",
    "decompose_cell_covariate",
    "dhat",
    "leverage",
    "leverage_matrix",
]

# Reciprocal condition number below which a covariate block is treated
# as rank deficient.
RCOND_MIN = 1e-10


@dataclass(frozen=True)
class CovariateRoles:
    """Column counts of the four covariate blocks."""

    p_a: int = 0
    p_b: int = 0
    p_ab: int = 0
    p_w: int = 0

    def __post_init__(self):
        for name in ("p_a", "p_b", "p_ab", "p_w"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 0:
                raise ValueError(f"{name} must be a nonnegative integer, got {value!r}")

    @property
    def total(self) -> int:
        return self.p_a + self.p_b + self.p_ab + self.p_w


@dataclass(frozen=True)
class CenteredDesign:
    """Raw and centered covariate blocks plus the full regression matrix.

    matrix has a leading intercept column followed by the row, column,
    cell, and obs blocks broadcast to one row per observation. cell_c is
    double-centered; obs_c is centered within each cell; row_c and col_c
    are centered over their level index. xbar_row and xbar_col are the
    raw block means, kept for the intercept-error approximation.
    """

    layout: BalancedLayout
    roles: CovariateRoles
    x_row: np.ndarray
    x_col: np.ndarray
    x_cell: np.ndarray
    x_obs: np.ndarray
    row_c: np.ndarray
    col_c: np.ndarray
    cell_c: np.ndarray
    obs_c: np.ndarray
    xbar_row: np.ndarray
    xbar_col: np.ndarray
    matrix: np.ndarray
    column_names: tuple[str, ...] = field(default=())

    @property
    def p_cell(self) -> int:
        """Columns in the cell block, whatever role it plays."""
        return self.x_cell.shape[2]


def _block(value, shape, what):
    if value is None:
        return np.zeros(shape[:-1] + (0,))
    arr = np.asarray(value, dtype=float)
    if arr.ndim == len(shape) - 1:
        arr = arr[..., None]
    if arr.ndim != len(shape) or arr.shape[:-1] != shape[:-1]:
        raise DataError(
            f"{what} block must have shape {shape[:-1] + ('p',)}, got {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{what} block contains non-finite values")
    return arr


def build_centered_design(
    layout: BalancedLayout,
    x_row=None,
    x_col=None,
    x_cell=None,
    x_obs=None,
    names: dict | None = None,
) -> CenteredDesign:
    """Assemble a CenteredDesign from role-tagged raw covariate blocks.

    Any block may be omitted. A trailing covariate axis of size one may
    be left implicit (a (g, h) cell array is read as (g, h, 1)). With
    m = 1, an obs block is rejected since there is no replicate margin
    to vary along.
    """
    g, h, m = layout.shape
    x_row = _block(x_row, (g, -1), "row")
    x_col = _block(x_col, (h, -1), "column")
    x_cell = _block(x_cell, (g, h, -1), "cell")
    if m == 1:
        if x_obs is not None and np.size(x_obs):
            raise DataError("obs block requires replicates (m > 1)")
        x_obs = np.zeros((g, h, 1, 0))
        roles = CovariateRoles(
            p_a=x_row.shape[1], p_b=x_col.shape[1], p_ab=0, p_w=x_cell.shape[2]
        )
    else:
        x_obs = _block(x_obs, (g, h, m, -1), "obs")
        roles = CovariateRoles(
            p_a=x_row.shape[1],
            p_b=x_col.shape[1],
            p_ab=x_cell.shape[2],
            p_w=x_obs.shape[3],
        )

    row_c = x_row - x_row.mean(axis=0, keepdims=True)
    col_c = x_col - x_col.mean(axis=0, keepdims=True)
    cell_c = np.stack(
        [center_two_way(x_cell[:, :, p]) for p in range(x_cell.shape[2])], axis=-1
    ) if x_cell.shape[2] else x_cell
    obs_c = x_obs - x_obs.mean(axis=2, keepdims=True)

    n = layout.n
    cols = [np.ones((n, 1))]
    cols.append(np.repeat(x_row, h * m, axis=0))
    cols.append(np.tile(np.repeat(x_col, m, axis=0), (g, 1)))
    cols.append(np.repeat(x_cell.reshape(g * h, -1), m, axis=0))
    cols.append(x_obs.reshape(n, -1))
    matrix = np.hstack(cols)

    names = names or {}
    column_names = ["intercept"]
    for key, count in (("row", roles.p_a), ("col", roles.p_b),
                       ("cell", x_cell.shape[2]), ("obs", x_obs.shape[3])):
        given = list(names.get(key, []))
        if given and len(given) != count:
            raise DataError(
                f"{key} names: expected {count} entries, got {len(given)}"
            )
        column_names += given or [f"{key}{p}" for p in range(count)]

    return CenteredDesign(
        layout=layout,
        roles=roles,
        x_row=x_row,
        x_col=x_col,
        x_cell=x_cell,
        x_obs=x_obs,
        row_c=row_c,
        col_c=col_c,
        cell_c=cell_c,
        obs_c=obs_c,
        xbar_row=x_row.mean(axis=0),
        xbar_col=x_col.mean(axis=0),
        matrix=matrix,
        column_names=tuple(column_names),
    )


def decompose_cell_covariate(x, layout: BalancedLayout) -> dict:
    """Split one observation-level covariate into role-tagged parts.

    The row part is the centered row mean, the column part the centered
    column mean, the cell part the double-centered cell mean, and (with
    replicates) the obs part the within-cell residual. The parts add
    back to x minus its grand mean, so fitting them with an intercept
    reproduces any fit of x itself.
    """
    g, h, m = layout.shape
    x = np.asarray(x, dtype=float)
    if m == 1 and x.shape == (g, h):
        x = x[:, :, None]
    if x.shape != (g, h, m):
        raise DataError(f"covariate shape {x.shape} does not fit layout {layout.shape}")
    cell = x.mean(axis=2)
    row = cell.mean(axis=1)
    col = cell.mean(axis=0)
    grand = row.mean()
    parts = {
        "row": (row - grand)[:, None],
        "col": (col - grand)[:, None],
        "cell": center_two_way(cell)[:, :, None],
    }
    if m > 1:
        parts["obs"] = (x - cell[:, :, None])[:, :, :, None]
    return parts


@dataclass(frozen=True)
class DhatMatrices:
    """Per-block average cross products of the centered covariates.

    d1 and d2 normalize by g and h; d3 by the cell count g*h; d4 by n.
    Empty blocks give 0 x 0 matrices.
    """

    d1: np.ndarray
    d2: np.ndarray
    d3: np.ndarray
    d4: np.ndarray


def dhat(design: CenteredDesign) -> DhatMatrices:
    g, h, m = design.layout.shape
    d1 = design.row_c.T @ design.row_c / g
    d2 = design.col_c.T @ design.col_c / h
    cell_flat = design.cell_c.reshape(g * h, -1)
    d3 = cell_flat.T @ cell_flat / (g * h)
    obs_flat = design.obs_c.reshape(design.layout.n, -1)
    d4 = obs_flat.T @ obs_flat / design.layout.n
    return DhatMatrices(d1=d1, d2=d2, d3=d3, d4=d4)


def _solve_block(d: np.ndarray, block_name: str) -> np.ndarray:
    """Inverse of a block cross-product matrix with a rank guard."""
    if d.shape[0] == 0:
        return d
    eigs = np.linalg.eigvalsh(d)
    if eigs[0] <= RCOND_MIN * max(eigs[-1], 1.0):
        raise RankDeficiencyError(
            f"{block_name} covariate block is rank deficient "
            f"(rcond={eigs[0] / max(eigs[-1], 1e-300):.2e}); drop collinear columns"
        )
    return np.linalg.inv(d)


def leverage_matrix(design: CenteredDesign, factor: str) -> np.ndarray:
    """Full leverage matrix H for one factor.

    H[s, u] = 1 + x_c[s]' D^{-1} x_c[u] over the factor's centered
    covariates; a matrix of ones when the block is empty. factor is
    "row" (g x g) or "col" (h x h).
    """
    if factor == "row":
        xc, size, name = design.row_c, design.layout.g, "row"
        d = xc.T @ xc / size
    elif factor == "col":
        xc, size, name = design.col_c, design.layout.h, "column"
        d = xc.T @ xc / size
    else:
        raise ValueError(f"factor must be 'row' or 'col', got {factor!r}")
    if xc.shape[1] == 0:
        return np.ones((size, size))
    dinv = _solve_block(d, name)
    return 1.0 + xc @ dinv @ xc.T


def leverage(design: CenteredDesign, factor: str, s: int, u: int) -> float:
    """Single leverage entry H[s, u] for the row or column factor."""
    size = design.layout.g if factor == "row" else design.layout.h
    for idx, axis in ((s, "s"), (u, "u")):
        if not 0 <= idx < size:
            raise IndexError(f"{factor} index {axis}={idx} out of range [0, {size})")
    return float(leverage_matrix(design, factor)[s, u])
