"""Exception hierarchy shared by every pvigcaps module."""


class PViGError(Exception):
    """Base class for all library errors."""


class ShapeError(PViGError, ValueError):
    pass


class NumericError(PViGError, ArithmeticError):
    """Non-finite values or a domain violation in verification mode."""


class ContractError(PViGError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(PViGError, ValueError):
    pass


class DegenerateGraphError(PViGError, ValueError):
    pass


class DegenerateBatchError(PViGError, ValueError):
    pass


class DataError(PViGError):
    pass


class UnknownLabelError(DataError):
    pass


class MissingImageError(DataError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__(f"{len(self.missing)} image(s) not found: {', '.join(self.missing)}")


class DecodeError(DataError):
    pass


class StratificationError(DataError):
    pass


class DivergenceError(PViGError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, batch, value):
        self.epoch, self.batch, self.value = epoch, batch, value
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")


class CheckpointError(PViGError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    """Stored tensors do not fit the model described by the stored config."""
