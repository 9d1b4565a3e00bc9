"""Exception hierarchy for the rpca toolkit."""
from typing import Optional


class RPCAError(Exception):
    """Base class for every error raised by rpca."""


class ShapeError(RPCAError, ValueError):
    """An array or image has the wrong shape."""


class DomainError(RPCAError, ValueError):
    """Values fall outside the range an operation accepts."""


class ParameterError(RPCAError, ValueError):
    """An operation parameter is invalid."""


class ConfigurationError(RPCAError):
    """Inconsistent or unknown configuration."""


class IngestionError(RPCAError):
    """A dataset or image could not be read."""


class SplitError(RPCAError):
    """A split policy cannot be applied to a manifest."""


class DataPipelineError(RPCAError):
    """Batch iteration failed."""


class WeightsNotFoundError(RPCAError):
    """Pretrained backbone weights are not present in the local cache."""


class TrainingError(RPCAError):
    """Training aborted."""

    def __init__(
        self,
        message: str,
        epoch: Optional[int] = None,
        batch: Optional[int] = None,
        parameter: Optional[str] = None,
    ):
        self.epoch = epoch
        self.batch = batch
        self.parameter = parameter
        where = []
        if epoch is not None:
            where.append(f"epoch={epoch}")
        if batch is not None:
            where.append(f"batch={batch}")
        if parameter is not None:
            where.append(f"parameter={parameter}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class EvaluationError(RPCAError):
    """A checkpoint cannot be evaluated against a manifest."""


class MetricError(RPCAError):
    """Metrics requested on empty or malformed input."""


class UnsupportedModelError(RPCAError):
    """The model does not expose what an operation needs."""


class CheckpointError(ConfigurationError):
    """A checkpoint directory is missing or cannot be read back."""
