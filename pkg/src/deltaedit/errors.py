"""Exception hierarchy shared by every module."""


class DeltaEditError(Exception):
    """Base class for all package errors."""


class ParameterError(DeltaEditError, ValueError):
    pass


class ShapeError(DeltaEditError, ValueError):
    pass


class VocabularyError(DeltaEditError, KeyError):
    def __init__(self, tokens):
        self.tokens = list(tokens)
        super().__init__(f"unknown token(s): {', '.join(repr(t) for t in self.tokens)}")

    def __str__(self):
        return self.args[0]


class ConfigurationError(DeltaEditError):
    pass


class StateError(DeltaEditError, RuntimeError):
    pass


class TrainingError(DeltaEditError, RuntimeError):
    def __init__(self, message, last_finite_epoch=None):
        super().__init__(message)
        self.last_finite_epoch = last_finite_epoch


class NumericError(DeltaEditError, FloatingPointError):
    def __init__(self, message, timestep=None):
        super().__init__(message)
        self.timestep = timestep


class InversionError(NumericError):
    pass


class ModelQualityError(DeltaEditError, RuntimeError):
    pass


class FormatError(DeltaEditError, ValueError):
    pass
