"""Package-level exception types."""

__all__ = ["ConfigError", "TrainingDiverged"]


class ConfigError(ValueError):
    """Invalid configuration value or unknown configuration key."""


class TrainingDiverged(RuntimeError):
    """Raised when optimization produces a non-finite loss.

    Carries a snapshot of the training state at the point of failure so
    the run can be diagnosed without re-running.
    """

    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}
