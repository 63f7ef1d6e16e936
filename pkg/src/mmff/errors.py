"""Exception types raised across the package."""


class MMFFError(Exception):
    """Base class for all package errors."""


class MalformedFile(MMFFError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InvalidTarget(MMFFError, ValueError):
    pass


class BehindCamera(MMFFError, ValueError):
    pass


class EmptyBox(MMFFError, ValueError):
    pass


class BadEdge(MMFFError, ValueError):
    pass


class ShapeMismatch(MMFFError, ValueError):
    pass


class ZeroVector(MMFFError, ValueError):
    pass


class DataEmpty(MMFFError, ValueError):
    pass


class NonFiniteLoss(MMFFError, RuntimeError):
    pass


class UnknownVariant(MMFFError, KeyError):
    pass


class SpecInvalid(MMFFError, ValueError):
    pass


class StageMismatch(MMFFError, ValueError):
    pass


class SampleNotFound(MMFFError, KeyError):
    pass


class ConfigError(MMFFError, ValueError):
    pass
