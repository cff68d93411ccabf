"""Exception hierarchy; each family maps to a distinct CLI exit code."""


class DeconfrecError(Exception):
    exit_code = 1


class ConfigError(DeconfrecError, ValueError):
    exit_code = 2


class DataError(DeconfrecError, ValueError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class NumericError(DeconfrecError, ArithmeticError):
    exit_code = 4


class StateError(DeconfrecError, RuntimeError):
    """Training state that does not fit together (e.g. plugin vs trunk shapes)."""

    exit_code = 4


class QueueStateError(StateError):
    """Raised on illegal gradient-queue transitions (duplicate push, early aggregate)."""


class VerificationError(DeconfrecError):
    exit_code = 5
