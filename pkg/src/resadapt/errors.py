"""Exception hierarchy shared by every resadapt module."""


class ResAdaptError(Exception):
    """Base class for all package errors."""


class ConfigError(ResAdaptError, ValueError):
    """Bad shapes, bad flags or an inconsistent configuration."""


class NumericError(ResAdaptError, ArithmeticError):
    """Non-finite values or an iterative routine that failed to converge."""


class FormatError(ResAdaptError):
    """Base class for MDTB/MDCK decoding problems."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class SizeMismatchError(FormatError):
    pass


class DigestError(ResAdaptError):
    """Parameters that must stay frozen were modified."""
