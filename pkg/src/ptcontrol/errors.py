"""Exception hierarchy shared by the library and the command line tool.

Every class carries an ``exit_code`` used by the CLI.
"""


class PtControlError(Exception):
    exit_code = 1


class ConfigError(PtControlError, ValueError):
    exit_code = 2


class ProvenanceError(PtControlError):
    exit_code = 3


class CapacityError(PtControlError):
    exit_code = 4


class NumericalError(PtControlError, ArithmeticError):
    exit_code = 5


class ShapeError(PtControlError, ValueError):
    exit_code = 5


class ValidationError(PtControlError, ValueError):
    exit_code = 5


class SamplingError(NumericalError):
    pass


class ResolutionError(NumericalError):
    pass


class EvaluationError(NumericalError):
    pass


class UnsupportedConfigurationError(PtControlError, ValueError):
    exit_code = 2


class FileFormatError(PtControlError):
    exit_code = 6


class TruncatedFileError(FileFormatError):
    exit_code = 7


class ChecksumError(FileFormatError):
    exit_code = 8


class VersionError(FileFormatError):
    exit_code = 9
