"""Exception types; each maps onto a stable CLI exit code."""


class ZSDFAError(Exception):
    exit_code = 1


class ConfigError(ZSDFAError, ValueError):
    exit_code = 2


class ContractError(ZSDFAError, ValueError):
    """A documented precondition of an operation was violated."""
    exit_code = 2


class DataError(ZSDFAError, ValueError):
    exit_code = 3


class NumericError(ZSDFAError, ArithmeticError):
    exit_code = 4

    def __init__(self, message: str, step: int | None = None, term: str | None = None):
        super().__init__(message)
        self.step = step
        self.term = term


class CompatibilityError(ZSDFAError):
    exit_code = 5
