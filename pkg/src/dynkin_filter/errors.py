"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class DynkinError(Exception):
    """Base class for every error raised by the package."""


class NonPositiveParameter(DynkinError, ValueError):
    """A market parameter that must be strictly positive is not."""


class DegenerateK(DynkinError, ValueError):
    """The transformed drift k is numerically zero (unsupported case)."""


class SingularTransform(DynkinError, ValueError):
    """The coordinate transform was asked to evaluate at y in {0, 1}."""


class NoRoot(DynkinError, RuntimeError):
    """A scalar smooth-fit equation has no bracketed root."""


class NoBracket(DynkinError, RuntimeError):
    """No sign change was found on the search interval."""


class NoConvergence(DynkinError, RuntimeError):
    """An iterative solver exhausted its budget."""

    def __init__(self, message: str, best_residual: float = float("nan")):
        super().__init__(message)
        self.best_residual = best_residual


class NoConvergenceAtSlice(NoConvergence):
    """Projected relaxation did not converge on one z slice."""


class DomainTooSmall(DynkinError, RuntimeError):
    """The initial slice of the marching scheme is not in the expected regime."""


class EmptyRegion(DynkinError, RuntimeError):
    """A stopping region has no node on the grid."""


class OutOfDomain(DynkinError, ValueError):
    """A query falls outside the solved grid."""


class ConfigError(DynkinError, ValueError):
    """Malformed run configuration."""
