"""Exception hierarchy shared by all modules."""

import numpy as np


class SpdFieldError(Exception):
    """Base class for package errors."""


class InvalidInputError(SpdFieldError, ValueError):
    """Input is malformed: non-finite, non-symmetric, wrong shape."""


class DimensionError(InvalidInputError):
    """Array length or shape does not match the declared dimension."""


class NotPositiveDefiniteError(SpdFieldError, np.linalg.LinAlgError):
    """Cholesky factorization failed.

    Attributes
    ----------
    pivot : int
        Zero-based index of the first failing pivot.
    index : int or None
        Position in a batch (or mesh node) where the failure happened.
    """

    def __init__(self, message, pivot=None, index=None):
        super().__init__(message)
        self.pivot = pivot
        self.index = index


class IndefiniteResultError(NotPositiveDefiniteError):
    """Denormalization produced a matrix that is not positive definite."""


class ConvergenceError(SpdFieldError, RuntimeError):
    """An iterative method did not converge."""


class SaturationError(SpdFieldError, ArithmeticError):
    """A distribution function saturated to 0 or 1 in floating point."""


class InsufficientDataError(SpdFieldError, ValueError):
    """Not enough realizations or observations for an estimator."""


class TruncationOverflowError(SpdFieldError, ValueError):
    """Requested more KL modes than the covariance rank supports.

    Attributes
    ----------
    achievable : int
        Largest truncation order the data supports.
    """

    def __init__(self, message, achievable):
        super().__init__(message)
        self.achievable = achievable


class DivisionGuardError(SpdFieldError, ZeroDivisionError):
    """Projection onto a mode with a numerically vanishing eigenvalue."""


class DomainError(SpdFieldError, ValueError):
    """Hyperparameters outside the admissible set."""


class InvariantViolation(SpdFieldError, AssertionError):
    """A mathematical invariant that should hold by construction failed."""


class AssemblyError(SpdFieldError, np.linalg.LinAlgError):
    """Assembled Galerkin system is not positive definite."""


class LikelihoodError(SpdFieldError, RuntimeError):
    """Likelihood is degenerate (all evaluations are -inf)."""


class SamplerError(SpdFieldError, RuntimeError):
    """MCMC acceptance rate left the usable range."""


class ConfigError(SpdFieldError, ValueError):
    """Run configuration is invalid."""


class DependencyError(SpdFieldError, FileNotFoundError):
    """An upstream artifact required by a command is missing."""
