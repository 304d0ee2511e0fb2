class FedNCFError(Exception):
    """Base class for errors raised by this package."""


class DataError(FedNCFError):
    """Input data is malformed or unusable for the requested configuration."""


class ConfigError(FedNCFError):
    """An experiment configuration key is unknown, mistyped or out of range."""


class DropoutError(FedNCFError):
    """A selected client's masked update is missing; the round cannot finish."""
