"""Shared error types and solver configuration."""

from __future__ import annotations

from dataclasses import dataclass


class LmmSelectError(Exception):
    """Base class for all package-specific errors."""


class SchemaError(LmmSelectError):
    """A column-role mapping refers to columns the file does not provide."""


class CsvParseError(LmmSelectError):
    """A data cell could not be parsed as a number."""


class DegenerateColumnError(LmmSelectError):
    """An all-zero design column cannot be standardized."""


class DimensionError(LmmSelectError):
    """Array shapes are inconsistent with the requested operation."""


class FactorizationError(LmmSelectError):
    """A matrix expected to be symmetric positive definite is not."""


class TuningError(LmmSelectError):
    """No candidate on the regularization grid produced a usable fit."""


@dataclass
class SolverOptions:
    """Stopping rules for the penalized solvers.

    ``cd_*`` fields govern the inner coordinate-descent loop of the
    fixed-effects solver, ``group_*`` the block updates of the
    random-effects solver, and ``lla_*`` the outer reweighting loop of
    both.  ``polish`` enables one extra inner solve at the final weights
    with a 100x tighter tolerance so that stationarity certificates hold
    at their stated precision.
    """

    cd_tol: float = 1e-8
    cd_max_sweeps: int = 1000
    group_tol: float = 1e-8
    group_max_sweeps: int = 2000
    lla_max_iter: int = 10
    lla_tol: float = 1e-7
    polish: bool = True

    def validate(self) -> None:
        if self.cd_tol <= 0 or self.group_tol <= 0 or self.lla_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.cd_max_sweeps < 1 or self.group_max_sweeps < 1 or self.lla_max_iter < 1:
            raise ValueError("iteration limits must be at least 1")
