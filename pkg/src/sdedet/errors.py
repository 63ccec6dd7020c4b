"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand extents are incompatible with an operation."""


class ConfigError(ValueError):
    """A block or network configuration is inconsistent."""


class ContractError(RuntimeError):
    """An API precondition was violated by the caller."""


class WeightFormatError(ValueError):
    """A weights file is malformed.

    ``offset`` is the byte position where parsing stopped, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DatasetError(ValueError):
    """An image/label directory or file cannot be used."""
