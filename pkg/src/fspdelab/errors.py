"""Shared exception types."""


class InputError(ValueError):
    """An operation received arguments outside its contract."""


class ConfigError(ValueError):
    """An experiment configuration violates one of its invariants."""


class ExplosionError(RuntimeError):
    """A trajectory was consumed past its recorded life time."""


class CertificationError(RuntimeError):
    """A regularizing field misses a required bound or fails to converge."""
