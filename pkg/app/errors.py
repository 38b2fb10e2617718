"""
Error hierarchy shared by every service and the command-line entry point.
"""


class ForecastError(Exception):
    """Base class for all errors raised by the toolkit"""
    exit_code = 1


class DimensionError(ForecastError, ValueError):
    pass


class ContractError(ForecastError):
    pass


class NumericError(ForecastError, ArithmeticError):
    pass


class ConfigurationError(ForecastError):
    pass


class DataIntegrityError(ForecastError):
    pass


class FormatError(ForecastError):
    pass


class CorruptionError(ForecastError):
    pass


class VersionError(ForecastError):
    pass


class DegenerateScaleError(ForecastError, ZeroDivisionError):
    pass
