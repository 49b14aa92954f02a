"""Exception types shared by every pipeline stage.

Each exception carries the exit code the CLI reports for it.
"""


class PipelineError(Exception):
    exit_code = 1


class ConfigError(PipelineError):
    exit_code = 2


class DataError(PipelineError):
    exit_code = 3


class VolumeError(DataError):
    pass


class EmptyBrainError(DataError):
    pass


class IngestionError(DataError):
    pass


class ShapeError(DataError):
    pass


class DegenerateInputError(DataError):
    pass


class ReportError(DataError):
    pass


class NormalizationError(DataError):
    pass


class DivergenceError(PipelineError):
    exit_code = 4
