"""Exceptions for the binary file formats."""


class FormatError(ValueError):
    """A checkpoint or frame file could not be parsed."""


class MagicError(FormatError):
    """The file does not start with the expected magic bytes."""


class VersionError(FormatError):
    """The file was written by an unsupported format version."""


class TruncatedError(FormatError):
    """The file ended before all declared content was read."""
