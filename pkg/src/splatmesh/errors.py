"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Input violates a documented precondition (shape, range, finiteness)."""


class DegenerateInputError(ValueError):
    """Input is well-formed but geometrically degenerate."""


class ParseError(ValueError):
    """Malformed manifest or file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FitDivergedError(RuntimeError):
    """Raised when the optimisation produces a non-finite loss.

    ``snapshot`` holds the step index, the loss parts and the scene at the
    last finite step so the failure can be inspected.
    """

    def __init__(self, message, snapshot):
        super().__init__(message)
        self.snapshot = snapshot
