"""Exception hierarchy shared by every matstack module."""

from __future__ import annotations

from typing import Any, Dict, Optional


class MatstackError(Exception):
    """Base class for all errors raised by matstack."""


class ConfigurationError(MatstackError, ValueError):
    """Invalid configuration value, unknown family, or unusable input stream."""


class DimensionError(MatstackError, ValueError):
    """Shapes or resolutions that do not agree."""


class ModeError(MatstackError, ValueError):
    """Inputs that contradict the requested frame-stack mode."""


class StructureError(MatstackError, ValueError):
    """A frame stack whose frame count does not match its mode."""


class ConditionError(MatstackError, ValueError):
    """Missing or superfluous sampling condition for a mode."""


class VisibilityError(MatstackError, RuntimeError):
    """The camera sees no part of the rendered plane."""


class GeometryError(MatstackError, ValueError):
    """Degenerate UV parametrization."""


class SpecError(MatstackError, ValueError):
    """Distortion spec that violates its invariants."""


class DominanceError(MatstackError, RuntimeError):
    """The dominant material covers less than the required fraction of a crop."""

    def __init__(self, fraction: float, required: float) -> None:
        super().__init__(
            f"Dominant material covers {fraction:.3f} of the crop (required {required:.2f})"
        )
        self.fraction = fraction
        self.required = required


class GenerationStuckError(MatstackError, RuntimeError):
    """Too many consecutive rejected samples while building a dataset."""


class CheckpointError(MatstackError, ValueError):
    """Malformed checkpoint or a checkpoint that does not match its config."""


class TrainingDivergedError(MatstackError, RuntimeError):
    """Loss became non-finite during training."""

    def __init__(
        self,
        step: int,
        t_histogram: Dict[str, Any],
        grad_norm: Optional[float],
    ) -> None:
        super().__init__(
            f"Non-finite loss at step {step} "
            f"(grad norm: {grad_norm}, t histogram: {t_histogram})"
        )
        self.step = step
        self.t_histogram = t_histogram
        self.grad_norm = grad_norm


class EmbedderTransportError(MatstackError, OSError):
    """Remote embedder could not produce a usable vector."""


class EmbedderTimeoutError(EmbedderTransportError):
    """Remote embedder did not answer in time."""


class MalformedEmbeddingError(EmbedderTransportError):
    """Remote embedder answered with an unparseable payload."""


class EmbeddingDimensionError(EmbedderTransportError):
    """Embedding vector length differs from the declared dimension."""
