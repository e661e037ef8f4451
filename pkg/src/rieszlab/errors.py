"""Exception types shared across the package."""


class RieszLabError(Exception):
    """Base class for all package errors."""


class UnsupportedKernel(RieszLabError):
    """Raised for (d, alpha) pairs outside the supported range."""


class CoincidentPoints(RieszLabError):
    """Singular kernel evaluated at x = y."""


class CoincidentParticles(RieszLabError):
    """Two particles of a configuration coincide under a singular kernel."""


class GridMismatch(RieszLabError):
    """Two grid-backed objects do not live on the same grid."""


class NonFinite(RieszLabError):
    """A quantity that must be finite overflowed or is NaN."""


class SolverDiverged(RieszLabError):
    """An iterative solver failed to meet its tolerance."""

    def __init__(self, message, residual=None, beta_reached=None):
        super().__init__(message)
        self.residual = residual
        self.beta_reached = beta_reached


class EmptyCarrier(RieszLabError):
    """A carrier threshold removed all mass."""


class NumericLoss(RieszLabError):
    """Orthogonalization lost all significant digits at some degree."""

    def __init__(self, message, degree=None):
        super().__init__(message)
        self.degree = degree


class ZeroAcceptance(RieszLabError):
    """A Metropolis chain stopped accepting moves."""


class InvalidInput(RieszLabError):
    """A construction or configuration parameter is out of range."""
