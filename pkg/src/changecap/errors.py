class ChangeCapError(Exception):
    """Base class for package errors."""


class ConfigurationError(ChangeCapError):
    """Invalid configuration value or flag combination."""


class ManifestError(ChangeCapError):
    """Malformed or inconsistent dataset manifest."""


class DegenerateBatchError(ChangeCapError):
    """Contrastive batch with an empty positive set or all-excluded denominator."""
