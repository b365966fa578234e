"""Exception hierarchy shared by every module.

Each family maps onto one CLI exit code: configuration problems exit 2,
bad input data exits 3 and numeric failures exit 4.
"""


class ColorNormError(Exception):
    exit_code = 1


class ConfigError(ColorNormError, ValueError):
    exit_code = 2


class DataError(ColorNormError, ValueError):
    exit_code = 3


class NumericError(ColorNormError, ArithmeticError):
    exit_code = 4


class ShapeMismatchError(ColorNormError, ValueError):
    pass


class InvalidRangeError(ColorNormError, ValueError):
    pass


class DegenerateBatchError(NumericError):
    pass


class NonFiniteError(NumericError):
    pass


# raster files
class UnsupportedFormatError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


# weight files
class BadMagicError(DataError):
    pass


class UnsupportedVersionError(DataError):
    pass


class ChecksumError(DataError):
    pass


class MalformedWeightsError(DataError):
    pass


# data-dependent estimation failures
class InsufficientTissueError(DataError):
    pass


class DegenerateStainError(DataError):
    pass


class RejectionBudgetError(DataError):
    pass
