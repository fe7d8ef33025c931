class GraphInformerError(Exception):
    """Base class for every error raised by the library."""


class DimensionError(GraphInformerError):
    pass


class ParameterError(GraphInformerError):
    pass


class NonFiniteError(GraphInformerError):
    pass


class GraphFormatError(GraphInformerError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class ConfigurationError(GraphInformerError):
    pass


class LossError(GraphInformerError):
    pass


class TrainingError(GraphInformerError):
    def __init__(self, message: str, batch_id: int | None = None):
        self.batch_id = batch_id
        if batch_id is not None:
            message = f"{message} (batch {batch_id})"
        super().__init__(message)


class CheckpointError(GraphInformerError):
    pass
