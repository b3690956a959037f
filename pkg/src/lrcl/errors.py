"""Exception types shared across the package."""


class EngineError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(EngineError):
    """Operands have incompatible shapes; carries both shapes."""

    def __init__(self, message: str, shape_a=None, shape_b=None):
        if shape_a is not None or shape_b is not None:
            message = f"{message} (got {shape_a} and {shape_b})"
        super().__init__(message)
        self.shape_a = shape_a
        self.shape_b = shape_b


class ParameterError(EngineError):
    """An argument is outside its documented domain."""


class DataError(EngineError):
    """A dataset is empty or otherwise unusable."""


class LabelError(EngineError):
    """A label does not belong to the classes the model knows."""


class ProtocolError(EngineError):
    """The class-incremental protocol was violated (e.g. duplicate classes)."""


class MetricError(EngineError):
    """A metric is undefined for the given input."""


class StateError(EngineError):
    """An object is not in the state the operation requires."""


class ParseError(EngineError):
    """Malformed input file; carries a line number when known."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(EngineError):
    """Invalid experiment configuration."""


class NumericalError(EngineError):
    """A computation produced NaN or Inf."""
