"""Exception hierarchy shared by every module."""


class DualRCError(Exception):
    """Base class for all package errors."""


class ShapeError(DualRCError, ValueError):
    pass


class ConfigError(DualRCError, ValueError):
    pass


class ParameterError(DualRCError, KeyError):
    pass


class GraphError(DualRCError, RuntimeError):
    pass


class FormatError(DualRCError, ValueError):
    pass


class BoundsError(DualRCError, IndexError):
    pass


class AnnotationError(DualRCError, ValueError):
    pass


class DegeneratePointError(DualRCError, ValueError):
    pass


class EmptyInputError(DualRCError, ValueError):
    pass


class TrainingError(DualRCError, RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class GenerationError(DualRCError, RuntimeError):
    pass
