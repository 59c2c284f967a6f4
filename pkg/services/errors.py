# services/errors.py

class QTrajError(Exception):
    """Base class for every error raised by the analysis services."""


class DimensionMismatch(QTrajError, ValueError):
    pass


class NullImage(QTrajError):
    """Raised when a matrix maps a representative to (numerically) zero."""

    def __init__(self, norm: float):
        super().__init__(f"null image: |Ax| = {norm:.3e}")
        self.norm = norm


class InstrumentFormatError(QTrajError, ValueError):
    """Instrument document could not be parsed; carries a location hint."""

    def __init__(self, message: str, location: str = ""):
        text = f"{location}: {message}" if location else message
        super().__init__(text)
        self.location = location


class UnknownInstrument(QTrajError, KeyError):
    pass


class ParameterRangeError(QTrajError, ValueError):
    pass


class SizeLimitExceeded(QTrajError):
    pass


class BudgetExceeded(QTrajError):
    pass


class EigensolverError(QTrajError):
    pass


class ErgodicityError(QTrajError):
    pass


class PeripheralNotRoots(QTrajError):
    pass


class NonSimplePeripheral(QTrajError):
    pass


class DegenerateTransition(QTrajError):
    pass


class ProductOverflow(QTrajError):
    pass


class TiltDomainError(QTrajError, ValueError):
    pass


class SpectrumConvergenceError(QTrajError):
    pass


class NonConvexCurve(QTrajError):
    pass


class HyperplaneDegenerate(QTrajError):
    pass


class PreconditionError(QTrajError, ValueError):
    pass
