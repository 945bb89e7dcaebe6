"""Exception hierarchy shared by all modules.

Each class carries the process exit code used by the command-line front end.
"""


class NetppError(Exception):
    exit_code = 1
    code = "ERROR"


class StructuralError(NetppError, ValueError):
    """Malformed input: bad schema, invalid ids, missing labels, empty network."""

    exit_code = 2
    code = "STRUCTURAL"


class NumericError(NetppError, ArithmeticError):
    """Non-finite values, log of zero intensity, diverging optimisation."""

    exit_code = 3
    code = "NUMERIC"


class DomainError(NetppError, ValueError):
    """Argument outside the mathematical domain of a function."""

    exit_code = 4
    code = "DOMAIN"


class PreconditionError(NetppError):
    """A documented precondition does not hold, e.g. a supercritical model."""

    exit_code = 4
    code = "PRECONDITION"


class InternalError(NetppError, RuntimeError):
    """Invariant violated inside the library; indicates a bug."""

    exit_code = 1
    code = "INTERNAL"


class SupercriticalError(PreconditionError, StructuralError):
    """The branching matrix has spectral radius of at least one."""

    exit_code = 4
    code = "SUPERCRITICAL"
