class MGPCAError(Exception):
    """Base class for every error raised by the package."""


class DimensionError(MGPCAError, ValueError):
    """Shapes disagree, a mode index is invalid or a component count is out of range."""


class DegenerateError(MGPCAError, ArithmeticError):
    """The numerical problem has no well-defined answer (zero data, singular system, ...)."""


class InvalidInputError(MGPCAError, ValueError):
    """Input data or files violate a documented invariant."""
