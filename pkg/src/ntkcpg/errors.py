"""Exception types raised across the package."""


class NtkCpgError(Exception):
    """Base class for all package errors."""


class SingularMatrix(NtkCpgError):
    pass


class Infeasible(NtkCpgError):
    def __init__(self, message, rows=()):
        super().__init__(message)
        self.rows = list(rows)


class IterationLimit(NtkCpgError):
    pass


class NonFinite(NtkCpgError):
    pass


class DegenerateKernel(NtkCpgError):
    pass


class SteppedAfterDone(NtkCpgError):
    pass


class ConfigError(NtkCpgError):
    pass
