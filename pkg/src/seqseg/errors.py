"""Exception types raised across the package."""


class SeqSegError(Exception):
    """Base class for all package errors."""


class ShapeError(SeqSegError, ValueError):
    """Tensor or array extents are incompatible with an operation.

    ``shapes`` holds the offending shapes so callers can report them.
    """

    def __init__(self, message, *shapes):
        self.shapes = tuple(tuple(s) for s in shapes)
        if shapes:
            message = f"{message} (shapes: {', '.join(str(tuple(s)) for s in shapes)})"
        super().__init__(message)


class GraphError(SeqSegError, RuntimeError):
    """Misuse of the autodiff tape (e.g. replaying it twice)."""


class DegenerateError(SeqSegError, ValueError):
    """Input is well-formed but mathematically degenerate (zero weights, empty masks)."""


class ConfigError(SeqSegError, ValueError):
    """Invalid configuration value."""


class WindowError(SeqSegError, ValueError):
    """A frame lies outside the training window."""
