"""Exception types shared across the library."""


class PvsslError(Exception):
    """Base class for all library errors."""


class DimensionError(PvsslError):
    """Array shapes are incompatible; the message names the offending axes."""


class ContractError(PvsslError):
    """A documented precondition was violated by the caller."""


class DegenerateInputError(PvsslError):
    """Input is structurally valid but degenerate (empty axis, zero vector, batch of one)."""


class NumericError(PvsslError):
    """A computation produced or received a non-finite value."""


class FormatError(PvsslError):
    """A file does not conform to its declared on-disk format."""
