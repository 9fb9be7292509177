"""Exception hierarchy shared across the package."""


class GumbelMapError(Exception):
    """Base class for all library errors."""


class StructuralError(GumbelMapError, ValueError):
    """Shape, index, or graph-structure mismatch between inputs."""


class PreconditionError(GumbelMapError, ValueError):
    """An operation's mathematical precondition is violated (e.g. a
    pairwise table is not supermodular for the cut solver)."""


class CapacityError(GumbelMapError, RuntimeError):
    """The requested exhaustive computation exceeds the safety guard."""


class DegenerateInstanceError(GumbelMapError, ValueError):
    """Volume-balanced weights are undefined: the ground truth has an
    empty foreground or background."""


class DatasetError(GumbelMapError, ValueError):
    """A dataset file could not be parsed or validated.

    ``line`` is the 1-based record line when known.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InternalInvariantError(GumbelMapError, RuntimeError):
    """An internal consistency check failed; indicates a bug."""
