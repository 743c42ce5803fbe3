"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: data problems -> 2,
numerical failures -> 3, constraint infeasibility -> 4.
"""


class SpatdeformError(Exception):
    """Base class for all package errors."""


class DomainError(SpatdeformError, ValueError):
    """A coordinate lies outside the knot-grid domain."""


class DataError(SpatdeformError, ValueError):
    """Malformed or insufficient input data (ingestion, dataset invariants)."""


class NumericalError(SpatdeformError, RuntimeError):
    """A numerical operation failed, e.g. a covariance matrix is not
    positive definite."""


class FitError(SpatdeformError, RuntimeError):
    """An estimation step failed (degenerate MDS, variogram without
    structure, gauge degeneracy, ...)."""


class InfeasibilityError(SpatdeformError, RuntimeError):
    """No feasible starting point exists for the constrained fit."""
