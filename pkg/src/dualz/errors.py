"""Exception hierarchy shared across pipeline stages."""


class DualZError(Exception):
    """Base class for all pipeline errors."""


class InvalidConfig(DualZError, ValueError):
    pass


class RangeTooSmall(DualZError, ValueError):
    pass


class FewerThanThreeFrames(DualZError):
    pass


class ZeroWeightSum(DualZError, ZeroDivisionError):
    pass


class FitDiverged(DualZError, RuntimeError):
    pass


class DeltaNotOnGrid(DualZError, ValueError):
    pass


class TooFewParticles(DualZError, ValueError):
    pass


class TooFewSamples(DualZError, ValueError):
    pass


class EmptySplit(DualZError, ValueError):
    pass


class ShapeMismatch(DualZError, ValueError):
    pass


class NoCachedForward(DualZError, RuntimeError):
    pass


class NonFiniteLoss(DualZError, FloatingPointError):
    def __init__(self, step, layer=None, value=None):
        self.step = step
        self.layer = layer
        self.value = value
        where = f" (first non-finite activation in {layer})" if layer else ""
        super().__init__(f"non-finite loss {value} at step {step}{where}")


# binary container errors
class FormatError(DualZError, IOError):
    pass


class BadMagic(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class ChecksumMismatch(FormatError):
    pass
