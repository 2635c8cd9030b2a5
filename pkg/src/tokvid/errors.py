"""Exception hierarchy shared across the package."""


class TokvidError(Exception):
    """Base class for all package errors."""


class DimensionError(TokvidError, ValueError):
    pass


class ShapeError(TokvidError, ValueError):
    pass


class DistributionError(TokvidError, ValueError):
    pass


class ArgumentError(TokvidError, ValueError):
    pass


class ConfigError(TokvidError, ValueError):
    pass


class PartitionError(TokvidError, ValueError):
    pass


class ParseError(TokvidError, ValueError):
    """Grammar violation while decoding a token sequence.

    ``index`` is the offending sequence position, when known.
    """

    def __init__(self, message: str, index: int | None = None):
        if index is not None:
            message = f"{message} (at index {index})"
        super().__init__(message)
        self.index = index


class SpecError(TokvidError, ValueError):
    pass


class SessionError(TokvidError, RuntimeError):
    pass


class NumericError(TokvidError, ArithmeticError):
    pass


class EmptyLossError(TokvidError, ValueError):
    pass


class InvariantError(TokvidError, RuntimeError):
    """An internal invariant failed; indicates a bug rather than bad input."""
