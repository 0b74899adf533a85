"""Exception hierarchy.

Two families matter to callers: :class:`ValidationError` (bad input or
configuration, CLI exit code 2) and :class:`NumericalError` (a run that
started from valid input but broke down, CLI exit code 3).
"""
from __future__ import annotations


class QFiltError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(QFiltError, ValueError):
    """Input failed a shape, symmetry or configuration check."""

    def __init__(self, message: str, errors: list[tuple[str, str]] | None = None):
        super().__init__(message)
        # (key path, reason) pairs for config validation; empty otherwise.
        self.errors = list(errors or [])


class DimensionMismatch(ValidationError):
    pass


class GridMismatch(ValidationError):
    pass


class ChannelOverlap(ValidationError):
    pass


class NumericalError(QFiltError, ArithmeticError):
    """A numerical procedure broke down.

    ``module`` and ``step`` are filled in by integrators so the CLI can
    point at where things went wrong.
    """

    def __init__(self, message: str, *, module: str = "", step: int | None = None):
        super().__init__(message)
        self.module = module
        self.step = step


class NotPositive(NumericalError):
    pass


class TraceVanishing(NumericalError):
    pass


class PseudoUnitarityViolated(NumericalError):
    pass


class ZeroIntensityJump(NumericalError):
    pass


class RateStepTooLarge(NumericalError):
    pass


class StepTooLarge(NumericalError):
    """dt exceeds the documented stability bound of the master integrator."""


class BlowUp(NumericalError):
    """A Riccati solution left the bounded region (norm above 1e12)."""
