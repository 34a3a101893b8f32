"""Exception hierarchy used across the package."""


class SEFVCError(Exception):
    """Base class for all package errors."""

    code = "error"


class AudioError(SEFVCError, ValueError):
    code = "audio"


class TooShortError(AudioError):
    """Input signal is shorter than the analysis window it needs."""

    code = "too_short"


class ShapeError(SEFVCError, ValueError):
    code = "shape"


class InsufficientDataError(SEFVCError, ValueError):
    code = "insufficient_data"


class ConfigError(SEFVCError, ValueError):
    code = "config"


class CheckpointError(SEFVCError):
    code = "checkpoint"


class TensorFileError(SEFVCError):
    code = "tensor_file"


class ModeError(SEFVCError, ValueError):
    """Raised when training-only arguments are given at inference or vice versa."""

    code = "mode"


class NonFiniteLossError(SEFVCError, FloatingPointError):
    code = "non_finite_loss"
