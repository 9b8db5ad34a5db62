"""Exception hierarchy.

Each class carries an ``exit_code`` so the command-line driver can map
failures onto process status without inspecting messages.
"""


class BilevelFDAError(Exception):
    exit_code = 1


class InputError(BilevelFDAError, ValueError):
    """Malformed or inconsistent user input."""

    exit_code = 2


class DomainError(InputError):
    """A point lies outside the interval a basis is defined on."""


class NumericalError(BilevelFDAError, ArithmeticError):
    exit_code = 3


class IllPosedSmoothingError(NumericalError):
    """The smoothing normal equations are singular."""


class RankDeficiencyError(NumericalError):
    """A weighted design block does not have full column rank."""


class ConvergenceError(BilevelFDAError):
    """Raised only when non-convergence is configured as fatal."""

    exit_code = 4
