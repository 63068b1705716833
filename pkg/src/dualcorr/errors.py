"""Exception types shared across the package."""


class DualcorrError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(DualcorrError, ValueError):
    """Operand dimensions are incompatible."""


class NumericError(DualcorrError, ArithmeticError):
    """A value became NaN or infinite where finiteness is required."""


class StateError(DualcorrError, RuntimeError):
    """An object was used in an invalid state (e.g. missing gradients)."""


class ParseError(DualcorrError, ValueError):
    """A shape file could not be parsed.

    Carries the 1-based line number when known.
    """

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        loc = ""
        if path is not None:
            loc += str(path)
        if line is not None:
            loc += f":{line}"
        super().__init__(f"{loc}: {message}" if loc else message)


class FormatError(DualcorrError, ValueError):
    """A binary artifact (CORR / DNET) is malformed."""


class TrainingError(DualcorrError, RuntimeError):
    """Training diverged; message names the failing epoch."""


class RefinementError(DualcorrError, RuntimeError):
    """Refinement diverged; message names the failing inner step."""


class DisconnectedError(DualcorrError, ValueError):
    """A geodesic query crossed connected components; lists offending vertices."""

    def __init__(self, message, vertices=()):
        self.vertices = list(vertices)
        super().__init__(message)


class ValidationError(DualcorrError, ValueError):
    """A run configuration failed validation before any compute."""
