"""Exception hierarchy shared by every spoofprobe module."""


class SpoofProbeError(Exception):
    """Base class for all library errors."""


class ConfigurationError(SpoofProbeError, ValueError):
    """Invalid configuration value or missing config field."""


class SchemaError(SpoofProbeError, ValueError):
    """Labels or annotations inconsistent with the declared schema."""


class DimensionError(SpoofProbeError, ValueError):
    """Array or tensor shape does not match what the operation expects."""


class ProviderError(SpoofProbeError, RuntimeError):
    """A geometric-target provider failed for a specific sample."""

    def __init__(self, sample_id, cause):
        super().__init__(f"provider failed for sample {sample_id!r}: {cause}")
        self.sample_id = sample_id


class TrainingDivergenceError(SpoofProbeError, FloatingPointError):
    """Loss became non-finite during optimisation."""

    def __init__(self, epoch, loss):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}")
        self.epoch = epoch


class NumericError(SpoofProbeError, FloatingPointError):
    """Non-finite gradient or value inside an attack."""


class RegistrationError(SpoofProbeError, ValueError):
    """Duplicate name in a registry."""


class AttackLookupError(SpoofProbeError, LookupError):
    """Unknown attack method requested."""


class LayerError(SpoofProbeError, ValueError):
    """Layer unsuitable for Grad-CAM (missing or non-spatial)."""


class EvaluationError(SpoofProbeError, ValueError):
    """Metric undefined for the given inputs."""


class CheckpointError(SpoofProbeError, ValueError):
    """Checkpoint missing, corrupt or written by an incompatible schema."""
