"""Exception hierarchy shared by the estimation modules and the CLI."""

from __future__ import annotations

import numpy as np


class JMCRError(Exception):
    """Base class for all package errors."""


class InvalidInputError(JMCRError, ValueError):
    """An argument is outside the domain of the operation."""


class DegenerateVarianceError(JMCRError, ArithmeticError):
    """The variance function evaluated to a non-positive or non-finite value."""

    def __init__(self, message: str, index: tuple[int, int] | None = None):
        super().__init__(message)
        self.index = index


class NotPositiveDefiniteError(JMCRError, np.linalg.LinAlgError):
    """Sigma(alpha) failed its Cholesky factorisation."""


class SingularInformationError(JMCRError, np.linalg.LinAlgError):
    """The Fisher information for beta could not be inverted."""


class CollinearBasisError(JMCRError, np.linalg.LinAlgError):
    """The trace Gram matrix of {I, W_1, ..., W_K} is singular."""

    def __init__(self, message: str, dependent: list[int] | None = None):
        super().__init__(message)
        self.dependent = dependent or []


class NonInvertibleBreadError(JMCRError, np.linalg.LinAlgError):
    """The sandwich bread matrix is singular."""


class InvalidTransformError(JMCRError, ValueError):
    """alpha_0 <= 0, so rho = alpha_k / alpha_0 is undefined."""


class ConvergenceError(JMCRError, RuntimeError):
    """An iterative routine hit its iteration cap."""

    def __init__(self, message: str, history: list | None = None):
        super().__init__(message)
        self.history = history or []


class InfeasibleCorrelationError(JMCRError, ValueError):
    """A target correlation cannot be attained for a pair of margins."""

    def __init__(self, message: str, pair: tuple[int, int, int] | None = None):
        super().__init__(message)
        self.pair = pair


class InvalidDesignError(JMCRError, ValueError):
    """A simulation design is not well posed."""


class SingularBlockError(JMCRError, np.linalg.LinAlgError):
    """A covariance block needed for a quadratic form is singular."""

    def __init__(self, message: str, block: str):
        super().__init__(message)
        self.block = block
