"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class ArchiveError(ValueError):
    """Malformed tensor archive. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class VolumeFormatError(ValueError):
    """Malformed volume container."""


class SwcParseError(ValueError):
    """Malformed SWC text. ``line`` is 1-based."""

    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line


class IncompatibleCheckpointError(ValueError):
    """Checkpoint tensors do not fit the requested model geometry."""

    def __init__(self, message, names=()):
        names = list(names)
        if names:
            message = f"{message}: {', '.join(names)}"
        super().__init__(message)
        self.names = names


class EmptyTraceError(ValueError):
    """Tracing found no foreground to reconstruct."""


class UndefinedDistanceError(ValueError):
    """A surface distance was requested for an empty mask."""
