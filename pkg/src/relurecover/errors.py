"""Exception hierarchy shared by every stage."""


class RecoveryError(Exception):
    """Base class for all errors raised by the package."""


class DomainError(RecoveryError, ValueError):
    """An argument lies outside the domain of the operation."""


class ResourceError(RecoveryError, MemoryError):
    """The requested dense object would exceed the configured memory cap."""

    def __init__(self, required_bytes, cap_bytes, what="tensor"):
        self.required_bytes = int(required_bytes)
        self.cap_bytes = int(cap_bytes)
        super().__init__(
            f"{what} needs {self.required_bytes} bytes, above the memory cap of {self.cap_bytes} bytes"
        )


class DecompositionUnstableError(RecoveryError):
    """Jennrich eigenvalues stayed complex after every retry."""


class DegenerateSpectrumError(RecoveryError):
    """Two Jennrich eigenvalues are too close to separate their eigenvectors."""


class NotRank1Error(RecoveryError):
    """A term that should be rank one has no dominant singular value."""


class ConditioningError(RecoveryError):
    """A linear system is too ill-conditioned to solve reliably."""

    def __init__(self, message, smallest_singular_value=None):
        self.smallest_singular_value = smallest_singular_value
        super().__init__(message)


class DegenerateTruncationError(RecoveryError):
    """Truncation at radius tau discarded every sample."""


class ConfigError(RecoveryError):
    """An experiment configuration failed validation."""


class StageError(RecoveryError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")
