"""Exception hierarchy shared across the package."""


class ReplayCLError(Exception):
    """Base class for all package errors."""


class DimensionError(ReplayCLError, ValueError):
    pass


class LabelError(ReplayCLError, ValueError):
    pass


class NumericError(ReplayCLError, ArithmeticError):
    pass


class FormatError(ReplayCLError, ValueError):
    pass


class DegenerateInputError(ReplayCLError, ValueError):
    pass


class ConfigurationError(ReplayCLError, ValueError):
    pass


class ContractError(ReplayCLError, RuntimeError):
    """An operation was called out of order or in violation of its preconditions."""


class MetricError(ReplayCLError, ValueError):
    """A metric is undefined for the given accuracy matrix."""
