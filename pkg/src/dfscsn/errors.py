"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class DfsCsnError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class DataValidationError(DfsCsnError, ValueError):
    """Malformed or inconsistent input data (exit code 3)."""

    exit_code = 3


class DomainError(DfsCsnError, ValueError):
    """Parameter outside its admissible domain."""

    exit_code = 3


class NumericalError(DfsCsnError, ArithmeticError):
    """Numerical failure, optionally tagged with the chain iteration (exit code 4)."""

    exit_code = 4

    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration
