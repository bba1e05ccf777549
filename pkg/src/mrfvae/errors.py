"""Exception hierarchy shared across the package."""


class MrfVaeError(Exception):
    """Base class for all package errors."""


class DimensionError(MrfVaeError, ValueError):
    """Shapes of operands do not chain or match."""


class ContractError(MrfVaeError, ValueError):
    """An operation precondition was violated."""


class DomainError(MrfVaeError, ValueError):
    """Scalar argument outside the mathematical domain."""


class NotPositiveDefinite(MrfVaeError, ValueError):
    """A matrix required to be SPD has a pivot at or below tolerance."""


class ConditioningError(MrfVaeError, ValueError):
    """A block to be conditioned on is numerically singular."""


class DegenerateConditioningError(ConditioningError):
    """Conditioning value too close to the density singularity."""


class NumericError(MrfVaeError, ArithmeticError):
    """A non-finite intermediate was produced."""


class TrainingError(MrfVaeError, RuntimeError):
    """Non-finite gradient or loss during optimization."""

    def __init__(self, message, param=None):
        super().__init__(message)
        self.param = param


class ConfigError(MrfVaeError, ValueError):
    """Invalid or inconsistent run configuration."""


class ParseError(MrfVaeError, ValueError):
    """Malformed on-disk artifact."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line
