"""Exception types shared across the package."""


class SFDError(Exception):
    pass


class ConfigError(SFDError, ValueError):
    """Invalid configuration. ``key`` holds the dotted path of the offending key when known."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class ShapeError(SFDError, ValueError):
    pass


class DivergenceError(SFDError, RuntimeError):
    """Non-finite values appeared in a loss, output or parameter."""

    def __init__(self, message: str, term: str | None = None, last_checkpoint: str | None = None):
        super().__init__(message)
        self.term = term
        self.last_checkpoint = last_checkpoint


class ArchiveError(SFDError, OSError):
    pass


class ChecksumError(ArchiveError):
    pass


class VersionError(ArchiveError):
    pass


class TextEmbedderUnavailable(SFDError, RuntimeError):
    pass


class UndefinedCorrelationError(SFDError, ValueError):
    """A correlation coefficient was requested for a zero-variance input."""
