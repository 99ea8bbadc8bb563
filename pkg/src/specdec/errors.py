"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value or config file is invalid."""


class CapacityError(RuntimeError):
    """A sequence would exceed the model's maximum cached length."""


class MaskError(ValueError):
    """An attention mask lets a token attend to a later position."""


class DataError(ValueError):
    """Input data does not satisfy an operation's preconditions."""
