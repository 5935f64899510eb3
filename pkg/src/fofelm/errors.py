"""Exception hierarchy; each class maps to a CLI exit code."""


class FofeLMError(Exception):
    exit_code = 3


class ConfigError(FofeLMError, ValueError):
    exit_code = 1


class RoutingError(ConfigError):
    pass


class DataError(FofeLMError):
    exit_code = 2


class ComparisonError(DataError):
    pass


class DimensionError(FofeLMError, ValueError):
    pass


class NumericalError(FofeLMError, FloatingPointError):
    pass
