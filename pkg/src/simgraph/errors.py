"""Exception types shared across the package."""


class SimGraphError(Exception):
    """Base class for all errors raised by simgraph."""


class ShapeError(SimGraphError, ValueError):
    pass


class ConfigError(SimGraphError, ValueError):
    pass


class DegenerateEmbeddingError(SimGraphError, ArithmeticError):
    """Raised when an embedding with zero norm would have to be normalized."""


class ParseError(SimGraphError, ValueError):
    """Malformed binary file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class BadMagicError(ParseError):
    pass


class VersionError(ParseError):
    pass


class TruncationError(ParseError):
    pass


class DimensionOverflowError(ParseError):
    pass


class TrainingError(SimGraphError, FloatingPointError):
    """Non-finite gradient during an optimisation step."""

    def __init__(self, block, message):
        super().__init__(f"non-finite gradient in parameter block '{block}': {message}")
        self.block = block
