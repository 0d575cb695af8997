"""Exception types shared across the package."""


class SafeCFError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SafeCFError):
    """Invalid configuration (dimensions, ratios, mismatched artifacts)."""


class DomainError(SafeCFError):
    """Input outside an operation's domain (bad shape, index, action id)."""


class EncodingError(SafeCFError):
    """Record serialization failure (shape mismatch against manifest)."""


class IntegrityError(SafeCFError):
    """Stored data fails a structural check (truncated or corrupt shard)."""


class TrainingError(SafeCFError):
    """Training diverged; carries the failing step index when known."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class NumericError(SafeCFError):
    """Non-finite values where finite ones are required."""
