"""Exception hierarchy shared across the toolkit."""


class ExplainkitError(Exception):
    """Base class for all toolkit errors."""


class SchemaError(ExplainkitError):
    """A dataset record violates the expected schema."""


class IngestionError(ExplainkitError):
    """A dataset file cannot be parsed (bad line, missing column)."""


class FormatError(ExplainkitError):
    """A template cannot be rendered because a required field is absent."""


class RetrievalError(ExplainkitError):
    """Context retrieval was asked to run against an empty corpus."""


class DecodeError(ExplainkitError):
    """An id sequence cannot be rendered back to text."""


class LossError(ExplainkitError):
    """A loss term received degenerate inputs (all-pad targets, NaN parts)."""


class TrainingError(ExplainkitError):
    """Training hit a non-recoverable condition (non-finite loss)."""


class EvalError(ExplainkitError):
    """An evaluation metric received inconsistent inputs."""
