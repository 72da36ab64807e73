"""Exception hierarchy shared across the toolkit."""


class GlacierError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(GlacierError):
    """Caller supplied an inconsistent or unknown configuration."""


class ValidationError(GlacierError):
    """Input data violates a documented precondition."""


class MetadataError(GlacierError):
    """Required georeferencing or file metadata is missing."""


class FormatError(GlacierError):
    """A binary container or wire payload is corrupt.

    ``offset`` is the byte position where decoding failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ShapeError(GlacierError):
    """Tensor shapes disagree with the contract of an operation."""


class ParseError(GlacierError):
    """A text document (GeoJSON, plan file) could not be parsed."""

    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)
        self.position = position
