"""Exception and warning types shared across the package."""

from __future__ import annotations


class CBSDEError(Exception):
    """Base class for all solver errors."""


class MalformedSpec(CBSDEError, ValueError):
    """A problem, driver or constraint description is inconsistent or incomplete."""


class NonMarkovian(CBSDEError):
    """The lattice engine was asked to handle path-dependent coefficients."""


class InvalidStrategy(CBSDEError, ValueError):
    """Switch times or target modes of a strategy are out of range."""


class NoConvergence(CBSDEError):
    """A per-step fixed point did not converge."""


class IterationLimit(CBSDEError):
    """The Picard iteration for the reflected system hit its round limit."""


class LadderExhausted(CBSDEError):
    """The penalization schedule ended before the stopping rule was met.

    The partially filled report is attached so callers can still inspect it.
    """

    def __init__(self, message: str, solution=None, report=None):
        super().__init__(message)
        self.solution = solution
        self.report = report


class NonTerminating(CBSDEError):
    """Strategy extraction produced more switches than the finiteness bound allows."""


class DegenerateStratum(UserWarning):
    """A regression stratum had too few paths; the fit fell back to a mean."""
