"""Exception types shared across the package.

Modeled outcomes that are part of normal operation (a point behind the camera,
a degenerate triangulation) are returned as ``None`` by the functions that
produce them. The classes below are for failures a caller has to handle.
"""


class LiftSlamError(Exception):
    """Base class for all package errors."""


class InitFailure(LiftSlamError):
    """Two-view initialization could not produce a usable map."""


class VariantMismatch(LiftSlamError, ValueError):
    """Descriptors of different variants or lengths were compared."""


class LengthMismatch(LiftSlamError, ValueError):
    """Vectors passed to a loss have different lengths."""


class MissingFrame(LiftSlamError, KeyError):
    """A feature provider has no data for the requested frame."""


class MalformedFile(LiftSlamError, ValueError):
    """An input file violates its format; message carries path and line."""


class ImageTooSmall(LiftSlamError, ValueError):
    pass


class NoPose(LiftSlamError, ValueError):
    pass


class DanglingKeyFrame(LiftSlamError, KeyError):
    pass


class UnknownKeyFrame(LiftSlamError, KeyError):
    pass


class LinkConflict(LiftSlamError, ValueError):
    """A keypoint is already associated with another map point."""


class SingularSystem(LiftSlamError, ArithmeticError):
    pass


class TooFewMatches(LiftSlamError, ValueError):
    pass


class DegenerateConfiguration(LiftSlamError, ValueError):
    pass


class TooFewDescriptors(LiftSlamError, ValueError):
    pass


class WrongMode(LiftSlamError, RuntimeError):
    pass


class TrackLost(LiftSlamError):
    pass


class LoopRejected(LiftSlamError):
    pass


class NoOverlap(LiftSlamError, ValueError):
    pass


class NoGroundTruth(LiftSlamError, ValueError):
    pass


class MalformedCalib(MalformedFile):
    pass


class MissingImages(LiftSlamError, FileNotFoundError):
    pass
