"""Exception hierarchy shared by all qgpe modules."""


class QGPEError(Exception):
    """Base class for every error raised by qgpe."""


class SingularSpectrum(QGPEError):
    """Sylvester operands share (numerically) an eigenvalue pair a + b = 0."""


class IllConditioned(QGPEError):
    """An iterative solve stagnated above its residual target."""


class NonFiniteDerivative(QGPEError):
    """A time derivative or propagated quantity produced NaN or Inf."""


class SingularGauge(QGPEError):
    """A gauge matrix could not be inverted."""


class DegenerateFixedPoint(QGPEError):
    """The dominant transfer fixed point is rank deficient."""


class NonInjective(QGPEError):
    """The dominant eigenvalue of the transfer generator is degenerate."""


class SingularDensity(QGPEError):
    """A reduced density matrix is too close to singular to invert."""


class GaugeFixingViolated(QGPEError):
    """A tangent vector does not satisfy V = -R^dagger W."""


class NoConvergence(QGPEError):
    """An iteration hit its step cap before reaching tolerance."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class StepTooLarge(QGPEError):
    """The energy jumped by more than the allowed amount in a single step."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class NotStationary(QGPEError):
    """A state handed to the linearization is not a stationary point."""


class ShiftSingular(QGPEError):
    """A shifted transfer solve hit the fixed-point kernel (k = 0)."""


class Resonance(QGPEError):
    """The driven linear-response system is (near) singular at this omega."""


class ResourceLimit(QGPEError):
    """Problem size exceeds the brute-force oracle caps."""
