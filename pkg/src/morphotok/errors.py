"""Exception hierarchy shared across the package."""


class MorphotokError(Exception):
    """Base class for every error raised by morphotok."""


class CorpusError(MorphotokError, ValueError):
    pass


class DecodeError(CorpusError):
    pass


class MixedDomainError(CorpusError):
    pass


class EmptyCorpusError(CorpusError):
    pass


class TooFewSequences(CorpusError):
    pass


class SegmentationError(MorphotokError, ValueError):
    pass


class PositionOutOfRange(SegmentationError, IndexError):
    pass


class InfeasibleConstraints(SegmentationError):
    pass


class SequenceTooLong(SegmentationError):
    pass


class ManifoldError(MorphotokError, ValueError):
    pass


class EmptyContext(ManifoldError):
    pass


class NonTangentInput(ManifoldError):
    pass


class DimensionMismatch(ManifoldError):
    pass


class DegenerateMidpoint(ManifoldError):
    pass


class MetricError(MorphotokError, ValueError):
    pass


class LengthMismatch(MetricError):
    pass


class NonpositiveInput(MetricError):
    pass


class TooFewTraces(MetricError):
    pass


class TooFewIterations(MetricError):
    pass


class NoSharedForms(MetricError):
    pass


class EmptyEval(MetricError):
    pass


class EmptyState(MetricError):
    pass


class ReportError(MorphotokError):
    pass


class MissingReport(ReportError, FileNotFoundError):
    pass


class MalformedReport(ReportError, ValueError):
    pass


class ConfigError(MorphotokError, ValueError):
    pass


class EmptyBucket(MorphotokError, ValueError):
    pass
