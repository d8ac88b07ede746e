"""Exception hierarchy shared across the package."""


class IsdError(Exception):
    """Base class for all package errors."""


class ShapeError(IsdError, ValueError):
    pass


class DomainError(IsdError, ValueError):
    """Input outside the mathematical domain of an operation (e.g. log of a non-positive)."""


class NumericError(IsdError, ArithmeticError):
    """A NaN or Inf appeared in a computed tensor."""


class DegenerateInputError(IsdError, ValueError):
    """Input is structurally valid but makes the operation undefined (constant image, zero-norm row)."""


class UndefinedMetricError(IsdError, ValueError):
    """Metric is undefined for the given input (empty mask, single-class labels)."""


class FormatError(IsdError, ValueError):
    """Malformed ISDT file, manifest or config."""
