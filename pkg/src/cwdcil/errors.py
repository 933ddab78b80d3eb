class ConfigError(ValueError):
    """Experiment configuration failed validation."""


class DatasetMissingError(FileNotFoundError):
    """Requested dataset is not available under the dataset root."""


class NonFiniteLossError(FloatingPointError):
    """A loss became NaN/inf; ``stage`` names the pipeline stage it happened in."""

    def __init__(self, stage: str, message: str = ""):
        super().__init__(message or f"non-finite loss in {stage} stage")
        self.stage = stage


class StageOrderError(RuntimeError):
    """Pipeline stages were invoked out of order."""
