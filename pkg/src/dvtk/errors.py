"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration/validation
problems exit 2, data/format problems exit 3, everything else exits 4.
"""


class DvtkError(Exception):
    """Base class for all package errors."""


class ConfigError(DvtkError):
    """Invalid configuration: bad field values, channel mismatches, unknown keys."""


class ShapeError(ConfigError):
    """Tensor dimensions incompatible with the requested operation."""


class DataError(DvtkError):
    """Malformed or out-of-range data: bad token files, corrupt payloads, code overflow."""


class InputError(DataError):
    """Numerically invalid input, e.g. non-finite latent entries."""


class AdapterError(DvtkError):
    """An injected adapter (feature extractor) failed."""


class TrainingError(DvtkError):
    """Training cannot continue, e.g. a loss became non-finite."""
