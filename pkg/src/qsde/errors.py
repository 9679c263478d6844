"""Error types shared across the package."""


class NumericalError(RuntimeError):
    """Raised when a computation produces non-finite or unusable values."""


class CouplingError(ValueError):
    """Raised when two objects that must share noise/grids do not."""
