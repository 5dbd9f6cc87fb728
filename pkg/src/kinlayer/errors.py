"""Exception types shared across the package.

Every failure mode that callers are expected to handle programmatically has
its own class so the CLI can map it to a machine-readable error report.
"""

from __future__ import annotations


class KinlayerError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(KinlayerError):
    """A run configuration failed validation.

    Parameters
    ----------
    message:
        Human-readable description.
    key:
        Dotted path of the offending config key, when known.
    """

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class NonConvexBoundaryError(KinlayerError):
    """The polar boundary curve has non-positive radius or curvature."""


class PointOutsideTubeError(KinlayerError):
    """A point lies outside the tubular neighborhood where boundary-layer
    coordinates are a bijection (normal depth >= R_min), or outside the
    closed domain."""


class NoConvergenceError(KinlayerError):
    """An iterative solve exhausted its iteration budget.

    Carries the iteration count and the last residual for diagnostics.
    """

    def __init__(self, message: str, iterations: int, residual: float):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class EnergyOutOfRangeError(KinlayerError):
    """A characteristic trace was requested beyond its turning point, where
    the conserved energy admits no real angle."""


class DegenerateDatumError(KinlayerError):
    """Boundary data is constant in the velocity angle; the regular/singular
    split short-circuits instead of building auxiliaries."""


class SignViolationError(KinlayerError):
    """The grazing-compatibility signs required for the interpolation weight
    lambda are violated (indicates a failed Milne solve)."""


class IllConditionedError(KinlayerError):
    """The fundamental-solutions collocation matrix is numerically singular
    (condition number above 1e12)."""

    def __init__(self, message: str, condition: float = float("inf")):
        super().__init__(message)
        self.condition = condition


class NonzeroRHSError(KinlayerError):
    """A Poisson right-hand side that must vanish by moment identities was
    measured above tolerance (flags an upstream bug)."""

    def __init__(self, message: str, measured: float = float("nan")):
        super().__init__(message)
        self.measured = measured


class UnresolvedRunError(KinlayerError):
    """A convergence-study run failed its self-convergence (resolution
    doubling) check and cannot be used for rate fitting."""
