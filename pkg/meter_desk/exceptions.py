"""Exceptions raised across meter_desk.

Every error carries the fields a caller needs to report it (operand names, shapes,
tensor names, step numbers) in addition to the message.
"""


class MeterError(Exception):
    """Base class for all meter_desk errors."""


class ConfigError(MeterError):
    """Unknown key, bad value, or violated RunConfig invariant."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class ShapeError(MeterError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op, operands):
        # operands: sequence of (name, shape)
        self.op = op
        self.operands = tuple((name, tuple(shape)) for name, shape in operands)
        described = ", ".join(f"{name}{list(shape)}" for name, shape in self.operands)
        super().__init__(f"{op}: incompatible shapes {described}")


class IndexRangeError(MeterError):
    """An integer index (token id, class target) is outside its table."""


class NonFiniteError(MeterError):
    """NaN or Inf produced while the check barrier is enabled."""

    def __init__(self, op):
        self.op = op
        super().__init__(f"{op}: produced a non-finite value")


class GraphError(MeterError):
    """Malformed computation graph or misuse of backward."""


class GradCheckError(MeterError):
    """The gradient checker could not run (e.g. non-deterministic closure)."""


class MissingGradError(MeterError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"no gradient for registered parameter '{name}'")


class ScheduleError(MeterError):
    """Learning-rate schedule queried outside its domain."""


class ParameterGroupError(MeterError):
    def __init__(self, name, group):
        self.name = name
        self.group = group
        super().__init__(f"parameter '{name}' has no valid group tag (got {group!r})")


class DataError(MeterError):
    """Corpus generation or image I/O failure."""


class VocabularyError(MeterError):
    """Unknown token, overflowing sequence, or empty corpus."""


class CodebookError(MeterError):
    """Codebook fitting or quantisation failure."""


class SpanCorruptionError(MeterError):
    """Span corruption cannot be expressed with the available sentinels."""


class ItmSamplingError(MeterError):
    """No mismatching caption exists in the batch."""


class FusionError(MeterError):
    """Fusion or decoder inputs violate their contract."""


class CheckpointError(MeterError):
    pass


class CheckpointFormatError(CheckpointError):
    """Bad magic, unsupported version, or truncated payload."""


class CheckpointShapeError(CheckpointError):
    def __init__(self, name, expected, found):
        self.name = name
        self.expected = tuple(expected)
        self.found = tuple(found)
        super().__init__(
            f"tensor '{name}': checkpoint has shape {list(self.found)}, model expects {list(self.expected)}"
        )


class TrainingDivergedError(MeterError):
    def __init__(self, step, components):
        self.step = step
        self.components = dict(components)
        breakdown = ", ".join(f"{k}={v}" for k, v in self.components.items())
        super().__init__(f"non-finite loss at step {step} ({breakdown})")
