"""Exception types shared across the package."""


class NMNError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(NMNError, ValueError):
    """A data file has a malformed line."""

    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{self.path}:{lineno}: {message}")


class IntegrityError(NMNError, ValueError):
    """Data is well-formed but inconsistent (duplicate or unknown ids)."""


class DimensionError(NMNError, ValueError):
    """Array shapes do not agree."""


class ConfigError(NMNError, ValueError):
    """Invalid configuration or generator parameters."""


class EmptyNeighborhoodError(NMNError, ValueError):
    """An operation needs at least one neighbor but got none."""


class TrainingError(NMNError, RuntimeError):
    """Training produced a non-finite loss."""
