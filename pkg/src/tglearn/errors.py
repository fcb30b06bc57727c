"""Exception hierarchy shared by every stage of the pipeline."""


class TGError(Exception):
    """Base class for all errors raised by tglearn."""


class DimensionError(TGError, ValueError):
    pass


class ShapeError(TGError, ValueError):
    pass


class ParameterError(TGError, ValueError):
    pass


class CheckError(TGError):
    pass


class CorpusError(TGError, ValueError):
    pass


class ParseError(TGError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DuplicateError(TGError, ValueError):
    pass


class MissingIdError(TGError, ValueError):
    def __init__(self, missing):
        self.missing = list(missing)
        shown = ", ".join(str(m) for m in self.missing[:10])
        super().__init__(f"missing text for node id(s): {shown}")


class GenerationError(TGError, ValueError):
    pass


class IterationError(TGError, ValueError):
    pass


class LengthError(TGError, ValueError):
    pass


class PoolingError(TGError, ValueError):
    pass


class ConfigError(TGError, ValueError):
    pass


class StateError(TGError, RuntimeError):
    pass


class DataError(TGError, ValueError):
    pass


class CacheError(TGError, ValueError):
    pass


class CompatibilityError(TGError, ValueError):
    pass


class SamplingError(TGError, ValueError):
    pass


class ProtocolError(TGError, ValueError):
    pass


class MetricError(TGError, ValueError):
    pass


class EnsembleError(TGError, ValueError):
    pass


class ProjectionError(TGError, ValueError):
    pass


class ComparisonError(TGError, ValueError):
    pass


class SearchError(TGError, RuntimeError):
    pass


class DependencyError(TGError, FileNotFoundError):
    pass


class NumericError(TGError, FloatingPointError):
    pass
