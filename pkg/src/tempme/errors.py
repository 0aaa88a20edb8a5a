"""Exception types shared across the package."""

from __future__ import annotations


class ContractError(ValueError):
    """An operation was called with arguments violating its preconditions."""


class ScheduleError(ValueError):
    """A merge schedule failed to parse or is infeasible for a model config.

    ``position`` is the 0-based character offset in the schedule text when the
    error came from parsing, else ``None``.
    """

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
