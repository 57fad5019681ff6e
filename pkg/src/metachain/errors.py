"""Exception hierarchy.

Validation problems (bad input chains) and numerical problems (solver failures,
ill conditioning) are kept apart so the CLI can map them to distinct exit codes.
"""


class MetachainError(Exception):
    """Base class for all package errors."""


class ValidationError(MetachainError, ValueError):
    """The input chain or argument violates a structural requirement."""


class StructuralError(MetachainError):
    """A quantity that irreducibility guarantees to be positive came out zero."""


class TrapError(MetachainError):
    """Asymptotic dynamical traps make the requested solve ill-posed."""

    def __init__(self, message, traps=()):
        super().__init__(message)
        self.traps = frozenset(traps)


class NumericalError(MetachainError, ArithmeticError):
    """A finite-eps numerical computation failed."""


class IllConditionedError(NumericalError):
    def __init__(self, message, condition=float("inf")):
        super().__init__(message)
        self.condition = condition


class NewtonDivergenceError(NumericalError):
    pass


class OrderExtractionError(NumericalError):
    pass
