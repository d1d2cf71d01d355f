class PoiForecastError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 1


class ConfigError(PoiForecastError):
    exit_code = 1


class IngestError(PoiForecastError):
    exit_code = 2


class TrainingError(PoiForecastError):
    exit_code = 3


class NumericError(TrainingError):
    """Non-finite values during a forward pass or loss computation."""
