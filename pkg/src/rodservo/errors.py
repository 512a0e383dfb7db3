"""Exception types shared across the package.

Precondition violations raise plain :class:`ValueError`; the classes below
cover the named failure modes of each stage.
"""


class RodServoError(Exception):
    """Base class for all package errors."""


# rodsim
class Unreachable(RodServoError, ValueError):
    pass


class NoConvergence(RodServoError):
    def __init__(self, message, residual=None, sample_index=None):
        super().__init__(message)
        self.residual = residual
        self.sample_index = sample_index


class OutOfFrame(RodServoError, ValueError):
    pass


# centerline
class ParseError(RodServoError, ValueError):
    pass


class EmptyMask(RodServoError, ValueError):
    pass


class DegenerateChain(RodServoError):
    pass


# latent
class ZeroRange(RodServoError, ValueError):
    pass


class Diverged(RodServoError):
    pass


class DimensionMismatch(RodServoError, ValueError):
    pass


class RankDeficient(UserWarning):
    """Fewer nonzero singular values than requested components."""


# jacobian
class CollinearProbes(RodServoError):
    pass


# servo
class ConfigInvalid(RodServoError, ValueError):
    pass


class SolveFailure(RodServoError):
    pass


class SimulatorFailure(RodServoError):
    pass


class DivergenceDetected(RodServoError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


# bench
class ConfigError(RodServoError, ValueError):
    pass
