"""Exception types raised across the package."""


class HSARError(Exception):
    """Base class for library errors."""


class NotPositiveDefinite(HSARError, ArithmeticError):
    """A Cholesky pivot fell at or below the positivity tolerance."""

    def __init__(self, pivot, value=None):
        self.pivot = int(pivot)
        self.value = value
        msg = f"matrix is not positive definite (pivot {self.pivot}"
        if value is not None:
            msg += f", value {value:.3e}"
        super().__init__(msg + ")")


class RankDeficientDesign(HSARError, ArithmeticError):
    """The GLS normal matrix X'V^{-1}X is singular or numerically so."""


class MissingDataPresent(HSARError, ValueError):
    """A complete-data method was given a response with missing entries."""


class NonFiniteLikelihood(HSARError, ArithmeticError):
    """A likelihood evaluation left the valid parameter domain."""


class SingularInformation(HSARError, ArithmeticError):
    """The information matrix could not be inverted."""

    def __init__(self, message, eigenvalues=None):
        self.eigenvalues = eigenvalues
        super().__init__(message)


class DirectPathRefused(HSARError, ValueError):
    """The dense direct path was asked to handle more observations than its cap."""


class NotConverged(HSARError, RuntimeError):
    """The optimizer exhausted its evaluation budget; ``result`` holds the best point."""

    def __init__(self, result):
        self.result = result
        super().__init__(f"optimizer did not converge after {result.n_evals} evaluations")
