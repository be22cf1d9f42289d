"""Exception types shared across the package."""


class QcnnError(Exception):
    """Base class for all package errors."""


class DimensionError(QcnnError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigurationError(QcnnError):
    """An illegal configuration value or combination."""


class ContractError(QcnnError):
    """A caller violated an operation's precondition."""


class FormatError(QcnnError):
    """An on-disk file does not match its expected binary layout."""


class DataNotFoundError(QcnnError):
    """Dataset files are absent; message carries retrieval instructions."""


class SearchFailedError(QcnnError):
    """Every hyperparameter grid point failed to converge."""
