"""Custom exceptions for the onestepvc system."""


class OneStepVCError(Exception):
    """Base exception for all onestepvc-related errors."""

    pass


class ConfigurationError(OneStepVCError):
    """Raised when there is a configuration error or missing dependency."""

    pass


class ScheduleError(OneStepVCError):
    """Raised for invalid noise schedules or diffusion step indices."""

    pass


class ShapeError(OneStepVCError):
    """Raised when tensor shapes do not satisfy an operation's contract."""

    pass


class GeometryError(ShapeError):
    """Raised when mel geometry disagrees with a checkpoint or network."""

    pass


class DomainError(OneStepVCError):
    """Raised when a waveform is given where a mel is expected, or vice versa."""

    pass


class ConditioningError(OneStepVCError):
    """Raised when batch speaker conditioning violates its invariants."""

    pass


class DivergenceError(OneStepVCError):
    """Raised when a loss or network output becomes non-finite."""

    pass


class CheckpointError(OneStepVCError):
    """Raised when a checkpoint is corrupt, incompatible or incomplete."""

    pass


class CorpusError(OneStepVCError):
    """Raised for invalid audio, corpora or dataset splits."""

    pass


class BenchmarkError(OneStepVCError):
    """Raised when an RTF measurement cannot be performed."""

    pass


class JudgeError(OneStepVCError):
    """Raised when an external judge command fails or prints no score."""

    pass
