"""Exception hierarchy; each class carries the CLI exit code it maps to."""


class DisclosureError(Exception):
    exit_code = 1


class ConfigError(DisclosureError, ValueError):
    exit_code = 1


class DataError(DisclosureError, ValueError):
    exit_code = 2


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyDatasetError(DataError):
    pass


class NegativeExhaustionError(DataError):
    pass


class DegenerateSelectionError(DataError):
    pass


class NumericalError(DisclosureError, ArithmeticError):
    exit_code = 3


class LissaDivergenceError(NumericalError):
    pass


class EnumerationInfeasibleError(DisclosureError, RuntimeError):
    exit_code = 3
