"""Exception types shared across the package."""


class AdvSegError(Exception):
    """Base class for package-specific failures."""


class FormatError(AdvSegError, ValueError):
    """On-disk data does not match the documented binary layout."""


class DataError(AdvSegError, ValueError):
    """In-memory data violates an invariant (non-finite value, bad label, ...)."""


class NumericError(AdvSegError, ArithmeticError):
    """A computation produced non-finite values."""


class GraphError(AdvSegError, RuntimeError):
    """Invalid use of the autodiff graph (detached node, non-scalar loss)."""


class StateError(AdvSegError, RuntimeError):
    """Operation invoked on an object in the wrong state (e.g. untrained model)."""


class TrainingError(AdvSegError, RuntimeError):
    """Training diverged; carries the epoch index in the message."""


class AdaptationError(TrainingError):
    """Adaptation step failed; carries the iteration index in the message."""
