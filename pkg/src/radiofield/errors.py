"""Exception types shared across the package."""


class ParseError(ValueError):
    """Malformed input data; carries the 1-based line number when known."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class OutOfBoundsError(ValueError):
    """Points fell outside a voxel bounding box; carries offending indices."""

    def __init__(self, message, indices=()):
        super().__init__(message)
        self.indices = tuple(indices)


class InvalidStateError(RuntimeError):
    """Operation called on an object in the wrong state."""


class ConvergenceError(RuntimeError):
    """A numerical routine failed to reach the requested tolerance."""


class NumericalFailureError(RuntimeError):
    """An iterative solver hit its iteration cap without converging."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the offending step index."""

    def __init__(self, step, message=None):
        super().__init__(message or f"training diverged at step {step}")
        self.step = step


class GenerationError(RuntimeError):
    """Scene generation could not satisfy constraints within the retry cap."""
