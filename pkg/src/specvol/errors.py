"""Exception types raised across the package."""


class SpecvolError(Exception):
    """Base class for all package errors."""


class PointOutOfBand(SpecvolError, ValueError):
    pass


class LengthMismatch(SpecvolError, ValueError):
    pass


class SizeMismatch(SpecvolError, ValueError):
    pass


class ShapeMismatch(SizeMismatch):
    pass


class GridMismatch(SizeMismatch):
    pass


class InvalidSpec(SpecvolError, ValueError):
    pass


class InvalidSize(SpecvolError, ValueError):
    pass


class IndexOutOfRange(SpecvolError, IndexError):
    pass


class OperatorsNotIdentity(SpecvolError, ValueError):
    pass


class TruthUnavailable(SpecvolError, ValueError):
    pass


class Disconnected(SpecvolError, ValueError):
    pass


class IsolatedNode(SpecvolError, ValueError):
    pass


class ConfigError(SpecvolError, ValueError):
    pass


class MissingArtifacts(SpecvolError, FileNotFoundError):
    pass


class FormatVersionMismatch(SpecvolError, ValueError):
    pass


class ChecksumMismatch(SpecvolError, ValueError):
    pass


class NumericalError(SpecvolError, ArithmeticError):
    """Base for iterative solvers that failed to reach tolerance."""


class CgNoConvergence(NumericalError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class EigNoConvergence(NumericalError):
    pass


class SingularSystem(NumericalError):
    pass
