"""
Numerical failure types.

Bad inputs raise ValueError. Everything here means the inputs were valid but
the computation could not be completed; the CLI maps these to exit code 2.
"""


class NumericalError(ArithmeticError):
    """Base class for numerical failures."""


class SingularVolatilityError(NumericalError):
    """Volatility matrix singular or worse conditioned than the threshold."""


class DegenerateDriverError(NumericalError):
    """A driver or integrand that must be non-zero vanished at a grid node."""

    def __init__(self, message: str, node: int = None):
        super().__init__(message)
        self.node = node


class SeriesTruncationError(NumericalError):
    """Poisson-mixture series hit the hard term cap."""


class StructureConditionError(NumericalError):
    """Drift of the discounted assets is not in the range of the covariance."""


class AttainabilityError(NumericalError):
    """Claim is not attainable in the fine filtration."""


class BoundaryHitError(NumericalError):
    """Euler scheme drove a strictly positive state variable to zero."""
