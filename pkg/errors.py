"""Error hierarchy shared by every faultflow module and mapped to CLI exit codes."""


class FaultFlowError(Exception):
    """Base class for all faultflow errors."""

    exit_code = 1


class ConfigError(FaultFlowError):
    """Invalid configuration, flags or fault schedule."""

    exit_code = 1


class DataError(FaultFlowError):
    """Unreadable, malformed or missing telemetry artifacts."""

    exit_code = 2


class NumericError(FaultFlowError):
    """Non-finite inputs, losses or gradients."""

    exit_code = 3


class ContractError(FaultFlowError):
    """A precondition of an operation was violated by the caller."""

    exit_code = 1


class DimensionError(ContractError, ValueError):
    """Operand shapes do not agree."""


class DomainError(NumericError, ValueError):
    """Input outside the mathematical domain of an operation (e.g. log of 0)."""


class LabelIndexError(ContractError, IndexError):
    """Class label outside [0, P)."""


class InfeasibleError(ConfigError):
    """Requested permutation set cannot exist (P > n!)."""


class PoolError(ConfigError):
    """Random sampling could not produce enough distinct permutations."""


class UndefinedMetricError(ContractError):
    """Metric undefined for the given scores (e.g. a single class)."""
