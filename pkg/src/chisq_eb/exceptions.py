"""Exception hierarchy.

Every error carries an ``exit_code`` used by the command line front end:
2 for configuration problems, 3 for bad data, 4 for numerical failures.
"""


class ChisqEBError(Exception):
    exit_code = 1


class ConfigError(ChisqEBError):
    exit_code = 2


class DataError(ChisqEBError, ValueError):
    exit_code = 3


class DomainError(DataError):
    """Argument outside the domain of a function."""


class PoleError(DomainError):
    """Gamma function pole (non-positive integer argument)."""


class InsufficientDataError(DataError):
    pass


class MissingTruthError(DataError):
    pass


class AllNullError(DataError):
    """Local fdr is (numerically) one, so the non-null posterior is undefined."""


class ParseError(DataError):
    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class NumericalError(ChisqEBError, ArithmeticError):
    exit_code = 4


class ConvergenceError(NumericalError):
    pass


class SingularSystemError(NumericalError):
    pass


class BracketingError(NumericalError):
    pass


class TransformSaturationError(NumericalError):
    pass
