"""Exception types, mapped to process exit codes at the CLI boundary."""

__all__ = [
    "CrossreError",
    "DataError",
    "ConfigError",
    "NumericError",
    "RankDeficiencyError",
    "ConvergenceError",
    "ResourceError",
]


class CrossreError(Exception):
    """Base class for errors raised by this package."""


class DataError(CrossreError):
    """Malformed, unbalanced, or otherwise unusable input data."""


class ConfigError(CrossreError):
    """Invalid option values or scenario configuration."""


class NumericError(CrossreError):
    """Singular systems, degenerate designs, failed numerics."""


class RankDeficiencyError(NumericError):
    """A covariate block is rank deficient (collinear columns)."""


class ConvergenceError(NumericError):
    """The optimizer stopped without meeting the convergence criteria."""


class ResourceError(CrossreError):
    """A dense-matrix path was requested beyond its size guard."""
