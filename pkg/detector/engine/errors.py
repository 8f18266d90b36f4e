"""
Exceptions raised by the detection engine
"""


class DetectorError(Exception):
    """Base class for every engine error"""


class DimensionError(DetectorError):
    pass


class ConfigurationError(DetectorError):
    pass


class ContractError(DetectorError):
    pass


class DomainError(DetectorError):
    pass


class UndefinedMetricError(DetectorError):
    pass


class GenerationError(DetectorError):
    pass


class VocabularyError(DetectorError):
    pass


class LeakageError(DetectorError):
    """Train and held-out object tags overlap"""


class TrainingDivergedError(DetectorError):
    """Loss became non-finite during training"""

    def __init__(self, iteration: int, batch_ids: list, value: float):
        self.iteration = iteration
        self.batch_ids = list(batch_ids)
        self.value = value
        super().__init__(
            f"Non-finite loss {value!r} at iteration {iteration} (batch ids: {self.batch_ids})"
        )


class CheckpointError(DetectorError):
    """Checkpoint file could not be read"""

    def __init__(self, message: str, offset: int = None, expected: int = None):
        self.offset = offset
        self.expected = expected
        if offset is not None:
            message = f"{message} (offset {offset}" + (f", expected {expected} bytes)" if expected is not None else ")")
        super().__init__(message)
