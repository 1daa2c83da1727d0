"""Exception types raised across the package."""


class GradSurfError(Exception):
    """Base class for all package errors."""


class DegenerateCloud(GradSurfError):
    pass


class InvalidXi(GradSurfError):
    pass


class ConfigInvalid(GradSurfError):
    pass


class NonFiniteLoss(GradSurfError):
    def __init__(self, iteration, breakdown):
        self.iteration = iteration
        self.breakdown = breakdown
        super().__init__(f"non-finite loss at iteration {iteration}: {breakdown}")


class ArchitectureMismatch(GradSurfError):
    pass


class CorruptCheckpoint(GradSurfError):
    pass


class TapeConsumed(GradSurfError):
    pass


class EmptyLevelSet(GradSurfError):
    pass


class LengthMismatch(GradSurfError):
    pass


class FormatError(GradSurfError):
    """Unreadable or malformed input file; the message names the path and location."""

    def __init__(self, path, detail, line=None, byte=None):
        where = ""
        if line is not None:
            where = f" (line {line})"
        elif byte is not None:
            where = f" (byte {byte})"
        self.path = str(path)
        self.line = line
        self.byte = byte
        super().__init__(f"{path}{where}: {detail}")
