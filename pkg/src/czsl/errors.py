"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration/data problems exit 1,
runtime aborts (NaN loss, broken gradient graphs) exit 2.
"""


class ConfigurationError(ValueError):
    """A setting or argument combination that can never work."""


class CLIUsageError(ConfigurationError):
    """Bad command-line usage (unknown flag, malformed value)."""


class DataValidationError(ValueError):
    """A manifest, image, embedding file, or checkpoint that fails validation."""


class CheckpointSchemaError(DataValidationError):
    """Checkpoint schema version does not match this package."""


class GradientGraphError(RuntimeError):
    """A gradient-based attention map was requested from a detached feature."""


class TrainingAborted(RuntimeError):
    """Training stopped mid-run (non-finite loss, failed write)."""

    def __init__(self, message, step=None, breakdown=None):
        super().__init__(message)
        self.step = step
        self.breakdown = breakdown
