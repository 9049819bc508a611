"""Exception types raised across the toolkit."""


class AddnetError(Exception):
    """Base class for all toolkit errors."""


class DegenerateLandmarks(AddnetError, ValueError):
    pass


class DegenerateHull(AddnetError, ValueError):
    pass


class IncompatibleResolution(AddnetError, ValueError):
    pass


class ShapeMismatch(AddnetError, ValueError):
    pass


class BadClipLength(AddnetError, ValueError):
    pass


class SchemaError(AddnetError, ValueError):
    pass


class MissingFile(AddnetError, FileNotFoundError):
    """Raised with every missing path, not only the first one."""

    def __init__(self, paths):
        self.paths = [str(p) for p in paths]
        super().__init__("missing files: " + ", ".join(self.paths))


class EmptySplit(AddnetError, ValueError):
    pass


class NoEligibleSequence(AddnetError, ValueError):
    pass


class InsufficientPool(AddnetError, ValueError):
    pass


class DivergenceDetected(AddnetError, RuntimeError):
    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at step {step}")
