"""Exception hierarchy shared by all modules."""


class SchloeglError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(SchloeglError, ValueError):
    """Invalid sizes, parameters or scenario configuration."""


class ResolutionError(ConfigurationError):
    """The grid is too coarse to resolve an actuator support."""


class DegenerateFamilyError(SchloeglError):
    """The actuator/bump Gram matrix is singular."""


class NumericalError(SchloeglError, RuntimeError):
    """An eigen-solver or iterative method failed."""


class BlowUpError(SchloeglError, RuntimeError):
    """The state left the admissible range during time stepping.

    ``time`` is the last time reached and ``trace`` (when available) holds
    the partial record up to that time.
    """

    def __init__(self, message, time=None, trace=None):
        super().__init__(message)
        self.time = time
        self.trace = trace
