"""Exception hierarchy shared by all sunvo modules."""


class SunVOError(Exception):
    """Base class for every error raised by sunvo."""


class AngleNearPi(SunVOError):
    pass


class PointBehindCamera(SunVOError):
    pass


class DisparityTooSmall(SunVOError):
    pass


class TimestampOutOfRange(SunVOError):
    pass


class NonUnitInput(SunVOError):
    pass


class DegenerateMean(SunVOError):
    pass


class EmptySequence(SunVOError):
    pass


class DimensionMismatch(SunVOError):
    pass


class ConfigInvalid(SunVOError):
    pass


class DegenerateConfiguration(SunVOError):
    pass


class InsufficientTracks(SunVOError):
    pass


class NoConsensus(SunVOError):
    pass


class SolverDiverged(SunVOError):
    pass


class RankDeficient(SunVOError):
    pass


class FrameNotInWindow(SunVOError):
    pass


class LengthMismatch(SunVOError):
    pass


class DataFileError(SunVOError, OSError):
    """Missing or unreadable input/output path."""


class ParseError(SunVOError, ValueError):
    """A malformed row in one of the CSV/JSON exchange formats."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")
