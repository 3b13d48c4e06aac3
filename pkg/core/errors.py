"""
Exception types for the ts3codec package.
Every failure the codec reports is a subclass of CodecError so callers can catch one family.
"""


class CodecError(ValueError):
    """Base class for codec errors."""


class ConfigError(CodecError):
    """Invalid configuration value or unknown configuration field."""


class DataError(CodecError):
    """Unusable input data (empty corpus, unreadable audio, bad sample values)."""


class ShapeError(CodecError):
    """Tensor or frame shapes do not match the configuration."""


class TokenError(CodecError):
    """Token id outside the codebook range."""


class BitstreamError(CodecError):
    """Malformed container or token payload."""


class CheckpointError(CodecError):
    """Checkpoint file is corrupt, truncated or written by another version."""


class SessionError(CodecError):
    """Streaming session used outside its lifecycle."""


class TrainingDivergedError(RuntimeError):
    """A training step produced a non-finite loss."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report
