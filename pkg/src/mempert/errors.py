"""Exception hierarchy shared by all modules."""


class MempertError(Exception):
    """Base class for every error raised by the package."""


class InvalidParameter(MempertError, ValueError):
    pass


class DegeneratePosterior(MempertError):
    """A natural-parameter update produced something that is not a distribution."""


class NumericalFailure(MempertError, ArithmeticError):
    pass


class UnsupportedCurvature(MempertError):
    pass


class UnsupportedFamily(MempertError):
    pass


class SingularCurvature(MempertError):
    pass


class LeverageDegenerate(MempertError):
    """Raised when 1 - eps * v_i vanishes (the example fully determines its fit)."""


class ResourceLimit(MempertError):
    pass


class ConvergenceFailure(MempertError):
    def __init__(self, message, theta=None, grad_norm=None):
        super().__init__(message)
        self.theta = theta
        self.grad_norm = grad_norm


class CorrelationUndefined(MempertError):
    pass


class ParseError(MempertError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class LabelError(MempertError):
    pass


class ConfigError(MempertError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
