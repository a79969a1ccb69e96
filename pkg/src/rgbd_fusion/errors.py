"""Exception hierarchy shared by every module.

``ValidationError`` subclasses describe bad inputs (the CLI maps them to exit
code 2); everything else derived from ``PipelineError`` is a runtime failure.
"""


class PipelineError(Exception):
    pass


class ValidationError(PipelineError, ValueError):
    pass


# calib
class MalformedFile(ValidationError):
    pass


class InvalidIntrinsics(ValidationError):
    pass


class InvalidExtrinsics(ValidationError):
    pass


class EmptyResult(PipelineError):
    pass


# depth
class NoValidPixels(PipelineError):
    pass


class DegenerateRange(PipelineError):
    pass


class OutOfRange(ValidationError):
    pass


# fusion
class DimensionMismatch(ValidationError):
    pass


class IoFailure(PipelineError, OSError):
    pass


class NotFourChannel(ValidationError):
    pass


class ZeroStd(ValidationError):
    pass


class EmptyDataset(ValidationError):
    pass


# dataset
class MalformedJson(ValidationError):
    pass


class UnknownCategory(ValidationError):
    pass


class MissingMedia(ValidationError):
    pass


class DegenerateBox(ValidationError):
    pass


class CountMismatch(ValidationError):
    pass


class ConfigInvalid(ValidationError):
    pass


# detect
class NonPositiveSize(ValidationError):
    pass


class EmptyBox(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class CorruptCheckpoint(PipelineError):
    pass


# train
class NonFiniteGradient(PipelineError):
    pass


class EmptySplit(ValidationError):
    pass


class DivergedLoss(PipelineError):
    pass


# evaluate
class NoGroundTruth(PipelineError):
    pass


class NoClasses(PipelineError):
    pass


class EmptyRuns(ValidationError):
    pass


class DivisionByZero(PipelineError, ZeroDivisionError):
    pass
