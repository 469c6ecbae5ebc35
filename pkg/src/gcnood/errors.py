"""Exception hierarchy shared by every stage of the pipeline."""


class GcnOodError(Exception):
    """Base class for all errors raised by gcnood."""


class InvalidSpecError(GcnOodError, ValueError):
    pass


class FormatError(GcnOodError, ValueError):
    pass


class ShapeError(GcnOodError, ValueError):
    pass


class BatchTooSmallError(GcnOodError, ValueError):
    pass


class TrainingDivergedError(GcnOodError, RuntimeError):
    def __init__(self, epoch, message="loss became non-finite"):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch}: {message}")


class DegenerateEmbeddingError(GcnOodError, ValueError):
    def __init__(self, row):
        self.row = row
        super().__init__(f"embedding row {row} has zero norm")


class InvalidKError(GcnOodError, ValueError):
    pass


class InvalidMaskError(GcnOodError, ValueError):
    pass


class MetricError(GcnOodError, ValueError):
    pass


class ScoreError(GcnOodError, ValueError):
    pass


class RangeError(GcnOodError, ValueError):
    pass


class ConfigError(GcnOodError, ValueError):
    def __init__(self, key, message):
        self.key = key
        super().__init__(f"config key {key!r}: {message}")


class StageError(GcnOodError, RuntimeError):
    """Wraps a failure inside an experiment stage, tagging it with the stage name."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
