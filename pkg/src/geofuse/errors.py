"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: config/state problems exit 1,
data problems exit 2, violated internal contracts exit 3.
"""


class GeofuseError(Exception):
    """Base class for all package errors."""


class ContractError(GeofuseError):
    """A call violated an operation's preconditions or produced an invalid
    result (shape mismatch, non-finite values, non-scalar backward seed)."""


class ConfigError(GeofuseError):
    """Invalid configuration: bad selectors, unknown variant, missing targets."""


class StateError(GeofuseError):
    """Operation invoked in the wrong pipeline state (e.g. stage 2 before
    stage 1 has completed)."""


class DataError(GeofuseError):
    """Malformed records, images, or scoring inputs."""


class LoadError(GeofuseError):
    """Unreadable, corrupt, or version-mismatched checkpoint file."""
