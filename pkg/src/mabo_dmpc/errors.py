"""Exception hierarchy shared by all modules."""


class MaboError(Exception):
    """Base class for package errors."""


class InputError(MaboError, ValueError):
    """Malformed arguments: wrong dimensions, empty data, unknown identifiers."""


class NumericalError(MaboError):
    """A factorization or linear solve failed beyond recovery.

    Attributes
    ----------
    jitter : float or None
        Last diagonal jitter tried before giving up, when relevant.
    """

    def __init__(self, message, jitter=None):
        super().__init__(message)
        self.jitter = jitter


class ConvergenceError(MaboError):
    """An iterative solver stopped without meeting its tolerance.

    Attributes
    ----------
    residual : float or None
        Residual at the last iterate.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class StateError(MaboError):
    """An object was used before it was ready (e.g. an unfitted model)."""


class IterationError(MaboError):
    """A local solve failed inside a dual-decomposition iteration."""

    def __init__(self, message, agent=None):
        super().__init__(message)
        self.agent = agent


class EpisodeError(MaboError):
    """Closed-loop simulation failed at a given step."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class EvaluationError(MaboError):
    """The black-box objective could not be evaluated."""


class SizeError(MaboError):
    """An exact enumeration would exceed its path budget."""


class SchemaError(MaboError, ValueError):
    """A scenario document violates the schema.

    Attributes
    ----------
    path : str
        Dotted location of the offending entry.
    """

    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
