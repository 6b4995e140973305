"""Exception hierarchy shared by every module.

Each family carries the process exit code the command line maps it to.
"""


class DyirmaError(Exception):
    exit_code = 1


class ConfigError(DyirmaError):
    exit_code = 2


class DataError(DyirmaError):
    exit_code = 3


class FormatError(DataError):
    """Malformed delimited-text input (ragged rows, wrong column count)."""


class ValidationError(DataError):
    """Well-formed input whose values violate a domain constraint."""


class NumericalError(DyirmaError):
    exit_code = 4


class PDViolationError(NumericalError):
    """A covariance matrix failed its Cholesky positive-definiteness check."""


class DegenerateWeightsError(NumericalError):
    def __init__(self, segment, iteration=None):
        self.segment = segment
        self.iteration = iteration
        where = f"segment {segment}"
        if iteration is not None:
            where += f" at iteration {iteration}"
        super().__init__(f"all importance weights are zero for {where}")


class DegenerateDimensionError(NumericalError):
    def __init__(self, dim):
        self.dim = dim
        super().__init__(f"dimension {dim} has zero sample variance")


class ConvergenceError(DyirmaError):
    exit_code = 5


class DomainError(DyirmaError, ValueError):
    """Argument outside the mathematical domain of an operation."""

    exit_code = 3
