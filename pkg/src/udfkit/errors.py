"""Exception hierarchy shared by all udfkit modules."""


class UdfError(Exception):
    """Base class for udfkit errors."""


class ParseError(UdfError):
    def __init__(self, path, line, message):
        self.path = path
        self.line = line
        super().__init__(f"{path}, line {line}: {message}")


class EmptyInputError(UdfError):
    pass


class DegenerateInputError(UdfError):
    pass


class ShapeError(UdfError):
    pass


class MissingDataError(UdfError):
    pass


class NumericFailure(UdfError):
    """Raised when a non-finite value shows up during evaluation or accumulation."""

    def __init__(self, message, node=None):
        self.node = node
        super().__init__(message)


class EmptyBatchError(UdfError):
    pass


class CheckpointFormatError(UdfError):
    pass


class ConfigError(UdfError):
    def __init__(self, message, key=None):
        self.key = key
        super().__init__(message)


class PartialOutputError(UdfError):
    """Upsampling gave up before collecting enough points; ``points`` holds what was kept."""

    def __init__(self, message, points):
        self.points = points
        super().__init__(message)
