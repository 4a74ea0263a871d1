"""Exception types shared across the package."""


class NumericalError(ArithmeticError):
    """A matrix factorization or other numerical step failed irrecoverably."""


class ConfigError(ValueError):
    """An experiment configuration failed validation."""


class ConvergenceWarning(RuntimeWarning):
    """An iterative procedure hit its iteration cap before converging."""
