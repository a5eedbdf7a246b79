"""Exception hierarchy shared by all fpflow modules."""


class FpflowError(Exception):
    """Base class for every error raised by fpflow."""


class ConfigurationError(FpflowError, ValueError):
    """Invalid parameter, option name, or out-of-range setting."""


class ShapeError(FpflowError, ValueError):
    """Array shapes do not match what the operation expects."""


class DegenerateGeometryError(FpflowError):
    """Local geometry is rank deficient (e.g. collinear neighborhood)."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DegenerateStarError(DegenerateGeometryError):
    """The local Delaunay star around a point could not be formed."""


class IllConditionedFitError(DegenerateGeometryError):
    """Weighted least-squares design matrix exceeds the condition threshold."""


class SingularVelocityError(FpflowError):
    """A level-set velocity was evaluated where the level-set gradient vanishes."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class UsageError(FpflowError):
    """An object was used in a way its contract does not allow."""


class StateError(FpflowError):
    """Solver history is missing or inconsistent for the requested operation."""


class SolverError(FpflowError):
    """A sparse linear solve failed to reach the requested tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NonConvergenceError(FpflowError):
    """An iterative procedure hit its iteration limit."""

    def __init__(self, message, spread=None, iterations=None):
        super().__init__(message)
        self.spread = spread
        self.iterations = iterations


class CollapseSignal(FpflowError):
    """Mean curvature flow produced coincident points (normal termination)."""


class ParseError(FpflowError, ValueError):
    """A point cloud or field file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
