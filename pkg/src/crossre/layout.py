"""Balanced two-way layout: index maps, marginal averages, and centering.

Every observation sits in a cell of a complete g x h grid, with m
replicates per cell. The flat ordering runs the replicate index fastest,
then columns, then rows, so observation (i, j, k) lives at position
(i*h + j)*m + k. All summation here goes through numpy reductions, which
use pairwise accumulation, so long tables do not lose precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "BalancedLayout",
    "ResponseTable",
    "Averages",
    "flat_index",
    "unflat_index",
    "averages",
    "center_two_way",
]


@dataclass(frozen=True)
class BalancedLayout:
    """Dimensions of a complete crossed design.

    g and h are the factor level counts (rows and columns), m is the
    number of replicates per cell. m=1 is the design without replicates,
    where no interaction effect is identifiable.
    """

    g: int
    h: int
    m: int = 1

    def __post_init__(self):
        for name in ("g", "h", "m"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise TypeError(f"{name} must be an integer, got {value!r}")
        if self.g < 2:
            raise ValueError(f"need at least 2 row levels, got g={self.g}")
        if self.h < 2:
            raise ValueError(f"need at least 2 column levels, got h={self.h}")
        if self.m < 1:
            raise ValueError(f"need at least 1 replicate per cell, got m={self.m}")

    @property
    def n(self) -> int:
        return self.g * self.h * self.m

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.g, self.h, self.m)


@dataclass(frozen=True)
class ResponseTable:
    """Observed responses in flat order, tied to a layout."""

    layout: BalancedLayout
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape == self.layout.shape:
            values = values.reshape(self.layout.n)
        if values.shape != (self.layout.n,):
            raise ValueError(
                f"expected {self.layout.n} responses for layout {self.layout.shape}, "
                f"got shape {np.shape(self.values)}"
            )
        if not np.all(np.isfinite(values)):
            first_bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise ValueError(f"non-finite response at flat position {first_bad}")
        object.__setattr__(self, "values", values)

    def table(self) -> np.ndarray:
        """The responses reshaped to (g, h, m)."""
        return self.values.reshape(self.layout.shape)


@dataclass(frozen=True)
class Averages:
    """Grand, per-row, per-column, and per-cell means of one variable."""

    grand: float
    row: np.ndarray
    col: np.ndarray
    cell: np.ndarray


def flat_index(layout: BalancedLayout, i: int, j: int, k: int = 0) -> int:
    """Flat position of observation (i, j, k); replicate index cycles fastest."""
    if not 0 <= i < layout.g:
        raise IndexError(f"row index {i} out of range [0, {layout.g})")
    if not 0 <= j < layout.h:
        raise IndexError(f"column index {j} out of range [0, {layout.h})")
    if not 0 <= k < layout.m:
        raise IndexError(f"replicate index {k} out of range [0, {layout.m})")
    return (i * layout.h + j) * layout.m + k


def unflat_index(layout: BalancedLayout, pos: int) -> tuple[int, int, int]:
    """Inverse of flat_index."""
    if not 0 <= pos < layout.n:
        raise IndexError(f"flat position {pos} out of range [0, {layout.n})")
    rest, k = divmod(int(pos), layout.m)
    i, j = divmod(rest, layout.h)
    return i, j, k


def _as_cube(values, layout: BalancedLayout) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.shape == (layout.n,):
        return values.reshape(layout.shape)
    if values.shape == layout.shape:
        return values
    raise ValueError(
        f"values of shape {values.shape} do not fit layout {layout.shape}"
    )


def averages(table, layout: BalancedLayout | None = None) -> Averages:
    """Marginal means of a response table or of any n-vector.

    Accepts a ResponseTable, or a flat/(g,h,m) array together with its
    layout. The same helper serves responses, fitted means, covariates,
    and residuals.
    """
    if isinstance(table, ResponseTable):
        layout = table.layout
        cube = table.table()
    else:
        if layout is None:
            raise TypeError("layout is required when not passing a ResponseTable")
        cube = _as_cube(table, layout)
    cell = cube.mean(axis=2)
    row = cell.mean(axis=1)
    col = cell.mean(axis=0)
    return Averages(grand=float(row.mean()), row=row, col=col, cell=cell)


def center_two_way(cell_values: np.ndarray) -> np.ndarray:
    """Double-center a g x h matrix so all row and column means vanish.

    Returns value[i,j] - rowmean[i] - colmean[j] + grandmean. Additive
    structure a_i + b_j is annihilated; the map is an idempotent linear
    projector.
    """
    cell_values = np.asarray(cell_values, dtype=float)
    if cell_values.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {cell_values.shape}")
    row = cell_values.mean(axis=1, keepdims=True)
    col = cell_values.mean(axis=0, keepdims=True)
    return cell_values - row - col + cell_values.mean()
