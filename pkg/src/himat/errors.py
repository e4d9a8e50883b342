"""Exception and warning types shared across the library."""


class HimatError(Exception):
    """Base class for library errors."""


class ShapeMismatch(HimatError):
    """Operands have incompatible shapes."""


class NonFiniteValue(HimatError):
    """An operation produced NaN or Inf."""


class NonScalarLoss(HimatError):
    """backward() called on a tensor that is not a scalar."""


class TapeConsumed(HimatError):
    """backward() called twice through the same graph."""


class NonDeterministicFunction(HimatError):
    """Two forward evaluations of the same function differed."""


class UnknownBasis(HimatError):
    """Wavelet basis name is not registered."""


class OddDimensions(HimatError):
    """Decimated transform requires even spatial dims."""


class TOutOfRange(HimatError):
    """Diffusion time outside [0, 1]."""


class NaNLoss(HimatError):
    """Training loss became non-finite."""


class IndivisibleDims(HimatError):
    """Spatial dims not divisible by the codec factor."""


class InsufficientPoints(HimatError):
    """Not enough samples to fit a scaling law."""


class ConfigError(HimatError):
    """Run configuration failed validation."""


class DegenerateMapWarning(UserWarning):
    """A map had a constant gradient field; its correlations count as 0."""
