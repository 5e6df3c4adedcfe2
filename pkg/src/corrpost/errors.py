"""Exception hierarchy. Each family carries the CLI exit code it maps to."""


class CorrpostError(Exception):
    exit_code = 1


class ConfigError(CorrpostError):
    exit_code = 2


class DataError(CorrpostError):
    exit_code = 3


class SizeError(DataError, ValueError):
    pass


class DimensionError(DataError, ValueError):
    pass


class GeometryError(DataError, ValueError):
    pass


class ManifestError(DataError):
    pass


class InputError(DataError, ValueError):
    pass


class FormatError(DataError):
    pass


class NumericError(CorrpostError):
    exit_code = 4


class ParameterError(NumericError, ValueError):
    pass


class DegenerateFilterError(NumericError):
    pass


class UndefinedMetricError(NumericError, ValueError):
    pass


class TrainingDivergenceError(NumericError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class ModelStateError(NumericError):
    pass


class ShapeError(NumericError, ValueError):
    pass


class StateError(NumericError, RuntimeError):
    pass
