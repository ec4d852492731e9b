"""Exception hierarchy shared by every nightstereo module.

Each class name is the error name reported on stderr by the CLI.
"""
from typing import Optional


class NightStereoError(Exception):
    """Base class for all pipeline errors."""

    @property
    def name(self) -> str:
        return type(self).__name__


class ConfigError(NightStereoError):
    pass


# imaging

class PnmError(NightStereoError):
    """PNM decode failure located at a byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class MalformedHeader(PnmError):
    pass


class UnsupportedMaxval(PnmError):
    pass


class TruncatedData(PnmError):
    pass


class IoFailure(NightStereoError):
    def __init__(self, path, reason: Optional[str] = None):
        message = f"cannot access {path}"
        if reason:
            message += f": {reason}"
        super().__init__(message)
        self.path = path


class ZeroDimension(NightStereoError):
    pass


class NonPositiveSigma(NightStereoError):
    pass


class ShapeMismatch(NightStereoError):
    pass


# scenegen

class EmptyScene(NightStereoError):
    pass


class DegenerateCalibration(NightStereoError):
    pass


class EmptyTrajectory(NightStereoError):
    pass


# dataflow

class MissingDataset(NightStereoError):
    pass


class UnknownTopic(NightStereoError):
    pass


class NonMonotonicInput(NightStereoError):
    pass


class CycleInGraph(NightStereoError):
    pass


class UnregisteredNode(NightStereoError):
    pass


# enhance / segment

class ChannelsTooSmall(NightStereoError):
    pass


class ChannelMismatch(NightStereoError):
    pass


class MissingClass(NightStereoError):
    pass


class UnfittedModel(NightStereoError):
    pass


# stereo / vo

class NoOverlap(NightStereoError):
    pass


class DegenerateGeometry(NightStereoError):
    pass


class TooFewPoints(NightStereoError):
    pass


class ImageTooSmall(NightStereoError):
    pass


class MissingWaypoint(NightStereoError):
    pass


class EmptySequence(NightStereoError):
    pass


# cli

class MissingInput(NightStereoError):
    pass
