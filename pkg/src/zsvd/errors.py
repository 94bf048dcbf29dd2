"""Exception hierarchy shared across the package."""


class ZsvdError(Exception):
    pass


class ShapeError(ZsvdError, ValueError):
    pass


class NumericError(ZsvdError):
    """Raised when a linear-algebra kernel cannot produce a valid result."""


class SvdConvergenceError(NumericError):
    pass


class CholeskyError(NumericError):
    pass


class SingularFactorError(NumericError):
    pass


class FormatError(ZsvdError):
    """Base class for malformed tensor files."""


class TruncatedFileError(FormatError):
    pass


class MagicMismatchError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class DuplicateNameError(FormatError):
    pass


class LengthMismatchError(FormatError):
    pass


class ChecksumError(FormatError):
    pass
