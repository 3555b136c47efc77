"""Exception hierarchy shared by all pipeline stages."""


class PerfusionError(Exception):
    """Base class for every error raised by perfmap."""


# nifti_io
class NiftiError(PerfusionError):
    pass


class BadMagic(NiftiError):
    pass


class UnsupportedFormat(NiftiError):
    pass


class UnsupportedDatatype(NiftiError):
    pass


class TruncatedStream(NiftiError):
    pass


class NonFinite(NiftiError):
    pass


class MissingTimeSpacing(NiftiError):
    pass


class SingularAffine(PerfusionError):
    pass


class IoFailure(PerfusionError):
    pass


# preprocess
class DegenerateImage(PerfusionError):
    pass


# masking
class NoSkullFound(PerfusionError):
    pass


class EmptyMask(PerfusionError):
    pass


class GeometryMismatch(PerfusionError):
    pass


# bolus / ctc
class ZeroBaseline(PerfusionError):
    pass


class NoBolusDetected(PerfusionError):
    pass


class NoPreBolusFrames(PerfusionError):
    pass


class MissingEchoTime(PerfusionError):
    pass


# aif
class NoCandidates(PerfusionError):
    pass


class AllClustersRejected(PerfusionError):
    pass


class NoPeak(PerfusionError):
    pass


class FitDiverged(PerfusionError):
    pass


# deconvolution
class ZeroAif(PerfusionError):
    pass


class ZeroSignal(PerfusionError):
    pass


# phantom / validation
class SpecInvalid(PerfusionError):
    pass


class DegenerateRange(PerfusionError):
    pass


class MissingMap(PerfusionError):
    pass


class ConfigError(PerfusionError):
    pass


class StageError(PerfusionError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the error."""

    def __init__(self, stage: str, error: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(error).__name__}: {error}")
        self.stage = stage
        self.error = error
