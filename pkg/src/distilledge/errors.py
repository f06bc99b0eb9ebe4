"""Shared exception types."""


class DistilledgeError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(DistilledgeError):
    """A data file violates the documented format (bad label, duplicate id, ...)."""


class ConfigError(DistilledgeError):
    """A configuration value is unknown, mistyped, or out of range."""


class CheckpointError(DistilledgeError):
    """A checkpoint file is corrupt or does not match the requested config."""


class CapabilityError(DistilledgeError):
    """An operation requires a capability the model handle does not expose."""


class DependencyError(DistilledgeError):
    """A required upstream artifact (checkpoint, vocab, ...) is missing."""
