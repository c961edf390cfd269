"""Shared exception types. Every public entry point raises one of these."""


class MiniCilError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(MiniCilError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(MiniCilError):
    """An API precondition was violated (bad argument, bad call order)."""


class DegenerateInputError(MiniCilError):
    """Input is numerically degenerate (zero vector, non-finite values)."""


class NumericalError(MiniCilError):
    """A numerical routine failed to converge or factorize."""


class ParseError(MiniCilError):
    """A file could not be parsed; message carries line/offset context."""
