"""Exception hierarchy shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class DataError(ValueError):
    """Malformed or out-of-range input data."""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class TrainingDivergence(RuntimeError):
    """A loss or gradient became non-finite during training."""
