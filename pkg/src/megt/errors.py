"""Exception hierarchy shared across the package.

The CLI maps these onto its exit-code contract: config/data problems are
exit 2, numeric failures exit 3, check failures exit 1.
"""


class MegtError(Exception):
    """Base class for all package errors."""


class ShapeError(MegtError):
    """Tensor dimensions incompatible with the requested operation."""


class ContractError(MegtError):
    """An internal calling convention was violated (e.g. non-scalar loss)."""


class ConfigError(MegtError):
    """Invalid or unknown configuration value."""


class DataError(MegtError):
    """Problem with input data (bags, labels, manifests)."""


class NumericError(MegtError):
    """Non-finite values where finite ones are required."""


class BagFormatError(DataError):
    """Base for bag-file parse errors."""


class BadMagicError(BagFormatError):
    pass


class TruncatedBagError(BagFormatError):
    pass


class BagVersionError(BagFormatError):
    pass


class ManifestError(DataError):
    """Malformed manifest line; message carries the line number."""


class CheckpointError(DataError):
    """Malformed or mismatched model checkpoint file."""


class UndefinedMetricError(DataError):
    """Metric not defined for the given inputs (e.g. AUC with one class)."""
