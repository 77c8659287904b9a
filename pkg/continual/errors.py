class ContinualError(Exception):
    """Base class for every error raised by the engine."""


class ConfigError(ContinualError, ValueError):
    pass


class ShapeError(ContinualError):
    pass


class InvalidLabelError(ContinualError):
    pass


class EmptyHistogramError(ContinualError):
    """Raised when a histogram has no labeled pixel to normalize."""


class TrainingDivergedError(ContinualError):
    def __init__(self, step: int, message: str = "non-finite value during training"):
        super().__init__(f"{message} (step {step})")
        self.step = step


class ArchitectureMismatchError(ContinualError):
    pass


class ScenarioMismatchError(ContinualError):
    pass


class InvariantViolation(ContinualError):
    """A run-time contract of the buffer or harness was broken."""
