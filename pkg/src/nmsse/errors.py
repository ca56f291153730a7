"""Exception hierarchy shared by every module of the package."""


class NmsseError(Exception):
    """Base class for all errors raised by :mod:`nmsse`."""


class NonFiniteKernelValue(NmsseError, ValueError):
    pass


class ShapeMismatch(NmsseError, ValueError):
    pass


class PolicyInapplicable(NmsseError, ValueError):
    pass


class NotHermitian(NmsseError, ValueError):
    pass


class NotPositive(NmsseError, ValueError):
    """A covariance has an eigenvalue below the clipping tolerance."""

    def __init__(self, message, min_eig=None):
        super().__init__(message)
        self.min_eig = min_eig


class KernelNotSymmetric(NmsseError, ValueError):
    pass


class SchemeOverflow(NmsseError, ArithmeticError):
    """Runaway growth of a linear trajectory (usually a complex field over a long window)."""


class ZeroNormState(NmsseError, ArithmeticError):
    pass


class ConfigError(NmsseError, ValueError):
    """Invalid experiment configuration; the message names the offending key."""
