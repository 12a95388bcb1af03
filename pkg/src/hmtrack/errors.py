"""Exception classes shared across the package.

Each class carries an ``exit_code`` used by the command line front end:
1 usage, 2 data error, 3 numeric failure.
"""


class HMTError(Exception):
    exit_code = 3


class DataError(HMTError):
    exit_code = 2


class UsageError(HMTError):
    exit_code = 1


class EmptyOverlapError(HMTError):
    """Fewer valid sample pairs than mutual information needs."""


class AllInvalidError(HMTError):
    """Every candidate evaluated to an invalid (-inf) objective."""


class DomainError(HMTError, ValueError):
    pass


class ShapeMismatchError(DataError):
    pass


class MissingSliceError(DataError):
    pass


class CalibrationMissingError(UsageError):
    pass


class TooFewVolumesError(DataError):
    pass


class DegenerateTruthError(DataError):
    pass


class MalformedHeaderError(DataError):
    pass


class SizeMismatchError(DataError):
    pass


class BadMagicError(DataError):
    pass


class UnsupportedFeatureError(DataError):
    pass


class ConfigError(UsageError):
    pass
