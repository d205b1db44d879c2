"""Exception types shared across the package.

The CLI maps these to exit codes: ConfigError -> 2, DataError -> 3, anything
else -> 4.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration (caught before any work starts)."""


class DataError(ValueError):
    """Malformed input data (manifests, images, field files)."""


class ManifestFormatError(DataError):
    """Manifest header or cell cannot be parsed."""


class ManifestIntegrityError(DataError):
    """Manifest violates a uniqueness or consistency invariant."""
