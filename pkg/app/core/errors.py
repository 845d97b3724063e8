"""Exception hierarchy shared by the services, the CLI and the HTTP router."""

from typing import Optional


class RBGreedyError(Exception):
    """Base class for every error raised by the workbench."""


class InvalidArgumentError(RBGreedyError, ValueError):
    """An input violates a documented precondition."""


class NumericalFailureError(RBGreedyError):
    """A linear system lost positive definiteness or an iterative solve did not converge."""


class BreakdownError(NumericalFailureError):
    """The candidate snapshot is numerically contained in the current reduced space."""

    def __init__(self, message: str, residual: float = 0.0):
        super().__init__(message)
        self.residual = residual


class BudgetInfeasibleError(RBGreedyError):
    """A certified budget (m, N) exceeds the configured resource caps."""

    def __init__(self, message: str, m: int, N: int):
        super().__init__(f"{message} (m={m}, N={N})")
        self.m = m
        self.N = N


class BasisFileError(RBGreedyError):
    """A reduced basis file could not be decoded."""


class BasisVersionError(BasisFileError):
    pass


class BasisTruncatedError(BasisFileError):
    pass


class BasisChecksumError(BasisFileError):
    pass


class ExperimentIOError(RBGreedyError):
    """Writing experiment artifacts failed; completed files are listed in a manifest."""

    def __init__(self, message: str, manifest_path: Optional[str] = None):
        super().__init__(message)
        self.manifest_path = manifest_path
