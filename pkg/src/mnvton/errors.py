"""Exception types shared across modules (the CLI maps them to exit codes)."""


class ConfigError(ValueError):
    """A configuration or argument violates a documented precondition."""


class ContractError(ValueError):
    """An operation was called outside its contract (wrong variant, empty mask, ...)."""


class NumericalError(FloatingPointError):
    """Training or sampling produced a non-finite value."""
