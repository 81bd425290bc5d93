"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """Input lies outside the mathematical domain of the function."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""

    def __init__(self, op_name: str, message: str = ""):
        self.op_name = op_name
        super().__init__(message or f"non-finite values produced by '{op_name}'")


class DegenerateVectorError(ValueError):
    """A vector with (near-)zero norm was passed where a direction is required."""


class FormatError(ValueError):
    """A file does not conform to the on-disk format."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class MetricUndefinedError(ValueError):
    """The metric is undefined for the given sample composition."""
