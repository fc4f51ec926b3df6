"""Exception types raised across the package."""


class LtlShapeError(Exception):
    """Base class for all package errors."""


class InvalidMdp(LtlShapeError):
    pass


class NonUnichain(LtlShapeError):
    """The chain induced by a policy has more than one recurrent class."""


class NotCommunicating(LtlShapeError):
    pass


class NoConvergence(LtlShapeError):
    pass


class ParseError(LtlShapeError):
    pass


class UnknownAtom(ParseError):
    pass


class NonTotalTransition(ParseError):
    pass


class RegistryMismatch(LtlShapeError):
    pass


class InvalidC(LtlShapeError):
    pass


class EmptyRegionWarning(UserWarning):
    """Winning region is empty; the potential reduces to pure distance advice."""


class DistanceClampWarning(UserWarning):
    pass


class NonFinite(LtlShapeError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class UnknownEnv(LtlShapeError):
    pass


class InsufficientSeeds(LtlShapeError):
    pass


class ExperimentError(LtlShapeError):
    """A run inside an experiment failed; ``method`` and ``seed`` locate it, the cause is chained."""

    def __init__(self, message, method=None, seed=None):
        super().__init__(message)
        self.method = method
        self.seed = seed
