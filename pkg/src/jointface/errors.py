"""Exception types raised across the package."""


class JointFaceError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(JointFaceError, ValueError):
    def __init__(self, msg, *shapes):
        if shapes:
            msg = f"{msg}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(msg)


class NonFiniteInput(JointFaceError, ValueError):
    pass


class NotScalar(JointFaceError, ValueError):
    pass


class NonDeterministicFunction(JointFaceError, RuntimeError):
    pass


class InvalidLabel(JointFaceError, ValueError):
    pass


class MissingGradient(JointFaceError, RuntimeError):
    pass


class InvalidRatio(JointFaceError, ValueError):
    pass


class EmptyConfig(JointFaceError, ValueError):
    pass


class DegenerateBox(JointFaceError, ValueError):
    pass


class EmptyRoI(JointFaceError, ValueError):
    pass


class MaskShapeMismatch(JointFaceError, ValueError):
    pass


class NoValidRoIs(JointFaceError, RuntimeError):
    pass


class UnknownLayer(JointFaceError, KeyError):
    pass


class ConfigInfeasible(JointFaceError, ValueError):
    pass


class DegenerateLandmarks(JointFaceError, ValueError):
    pass


class CorruptManifest(JointFaceError, ValueError):
    pass


class ChecksumMismatch(JointFaceError, ValueError):
    pass


class NoGroundTruth(JointFaceError, ValueError):
    pass


class DatasetMissing(JointFaceError, FileNotFoundError):
    pass


class DivergedLoss(JointFaceError, FloatingPointError):
    pass


class ShapeIncompatible(JointFaceError, ValueError):
    pass


class ConfigError(JointFaceError, ValueError):
    pass
