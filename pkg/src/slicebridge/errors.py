"""Exception types shared across the package."""


class NoCandidateError(LookupError):
    """Raised when a position filter leaves no knowledge-base rows to rank."""


class ConfigurationError(RuntimeError):
    """Raised when a required artifact, config key, or checkpoint is missing."""


class VolumeLoadError(RuntimeError):
    """Raised when an on-disk volume fails validation during loading."""
