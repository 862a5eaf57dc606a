"""Errors raised by the binary file formats (clips and checkpoints)."""


class FormatError(ValueError):
    """Base for malformed clip or checkpoint files."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class TruncatedPayloadError(FormatError):
    """Payload is shorter than the header declares."""


class HeaderMismatchError(FormatError):
    """Header fields are inconsistent with the payload or unsupported."""
