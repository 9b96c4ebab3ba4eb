"""Exception types raised across the package."""


class DenseViTError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(DenseViTError, ValueError):
    pass


class NotScalar(DenseViTError, ValueError):
    pass


class InvalidTarget(DenseViTError, ValueError):
    pass


class InvalidTemperature(DenseViTError, ValueError):
    pass


class InvalidGrid(DenseViTError, ValueError):
    pass


class NoValidPixels(DenseViTError, ValueError):
    pass


class EmptyAccumulator(DenseViTError, ValueError):
    pass


class EmptyDataset(DenseViTError, ValueError):
    pass


class CorruptCheckpoint(DenseViTError):
    pass


class VersionMismatch(DenseViTError):
    pass


class IncompatibleCheckpoint(DenseViTError):
    pass


class DecodeError(DenseViTError):
    def __init__(self, path, reason=""):
        self.path = str(path)
        super().__init__(f"cannot decode {self.path}" + (f": {reason}" if reason else ""))
