"""Exception hierarchy for krflow."""


class KRFlowError(Exception):
    pass


class ConfigurationError(KRFlowError):
    """Bad preset name, bad config key or an out-of-range parameter."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class DomainTooSmallError(KRFlowError):
    """Reference volume density has too much mass outside the box."""


class AdmissibilityError(KRFlowError):
    """The Hessian of F0 + phi stopped being positive definite."""

    def __init__(self, message, node=None, t=None):
        super().__init__(message)
        self.node = node
        self.t = t


class CalibrationError(KRFlowError):
    """Two discretisations of the same identity disagree beyond tolerance."""


class NumericalError(KRFlowError):
    """An iteration failed to converge or produced non-finite values."""


class EquivalenceViolation(KRFlowError):
    """Boundedness classes disagree (some bounded, some unbounded)."""
