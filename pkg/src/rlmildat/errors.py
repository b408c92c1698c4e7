"""Exception types shared across the package.

The CLI maps these onto exit codes: IO problems exit 2, config/data
problems exit 3 and numeric failures exit 4.
"""


class RlmilError(Exception):
    """Base class for all package errors."""


class ConfigError(RlmilError):
    pass


class DataError(RlmilError):
    pass


class DimensionError(DataError):
    pass


class ShapeError(DimensionError):
    pass


class LabelError(DataError):
    pass


class EmptyBagError(DataError):
    pass


class FormatError(DataError):
    pass


class SpecError(ConfigError):
    pass


class PoolSizeError(DataError):
    pass


class AlignmentError(DataError):
    pass


class ParameterError(ConfigError):
    pass


class ContractError(RlmilError):
    """An internal invariant was violated (e.g. a padded row reached the domain branch)."""


class NumericError(RlmilError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class TruncatedFileError(OSError):
    pass
