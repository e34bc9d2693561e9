"""Exception hierarchy shared by every stage of the pipeline."""


class SarwError(Exception):
    """Base class for all package errors."""


class RadiometryError(SarwError, ValueError):
    """Invalid radiometric input (non-finite dB, nonpositive power)."""


class ShapeError(SarwError, ValueError):
    """Grids or tensors whose dimensions do not agree."""


class DataLoadError(SarwError):
    """Manifest or raster file could not be read or validated."""


class ConfigError(SarwError, ValueError):
    """Invalid model, schedule, mask or run configuration."""


class NumericDivergenceError(SarwError, RuntimeError):
    """A non-finite loss, gradient or activation was encountered.

    ``last_checkpoint`` holds the most recent good checkpoint path (or
    ``None`` when divergence happened before the first save).
    """

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class CheckpointError(SarwError):
    """Malformed checkpoint file or checkpoint/config mismatch."""
