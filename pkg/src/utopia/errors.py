"""Exception classes shared across modules; the CLI maps each to an exit code."""


class ConfigError(ValueError):
    """Invalid configuration or arguments."""


class NumericalError(ArithmeticError):
    """Non-finite values or failed convergence."""
