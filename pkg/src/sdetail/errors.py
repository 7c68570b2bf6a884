"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: ``DomainError`` -> 2,
``NumericError`` -> 3, anything argparse-level -> 1.
"""

from __future__ import annotations


class DomainError(ValueError):
    """An input is outside the mathematical domain of an operation."""


class ExplosionError(DomainError):
    """A moment was requested at or beyond the critical moment.

    Carries ``mu_star`` so callers can back off to a valid tilt.
    """

    def __init__(self, message: str, mu_star: float):
        super().__init__(message)
        self.mu_star = mu_star


class NumericError(RuntimeError):
    """A numerical procedure failed to reach its accuracy target."""
