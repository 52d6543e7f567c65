"""Exception types shared across the workbench.

The CLI maps these onto exit codes: configuration problems exit 1,
domain failures (synthesis, divergence, estimation) exit 2 and training
aborts exit 3.
"""


class WorkbenchError(Exception):
    """Base class for all workbench errors."""


class ConfigError(WorkbenchError, ValueError):
    """Invalid model, config file or call arguments."""


class InstabilityError(WorkbenchError):
    """An iteration that should contract did not converge."""


class DivergenceError(WorkbenchError):
    """Simulated state magnitude exceeded the divergence guard."""


class EstimationError(WorkbenchError):
    """Not enough data to estimate a statistic."""


class SynthesisError(WorkbenchError):
    """No candidate region passed the invariance check."""


class VerificationError(WorkbenchError):
    """The invariance check itself could not be carried out."""


class TrainingAborted(WorkbenchError):
    """A training update produced non-finite values."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot
