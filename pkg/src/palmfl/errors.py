"""Exception hierarchy shared by every module."""


class PalmFLError(Exception):
    pass


class DimensionError(PalmFLError, ValueError):
    pass


class NumericError(PalmFLError, ArithmeticError):
    pass


class DegenerateInputError(PalmFLError, ValueError):
    pass


class ConfigurationError(PalmFLError, ValueError):
    pass


class LabelError(PalmFLError, ValueError):
    pass


class BatchConstructionError(PalmFLError, ValueError):
    pass


class ProtocolError(PalmFLError, RuntimeError):
    pass


class DeploymentStateError(ProtocolError):
    pass


class MetricError(PalmFLError, ValueError):
    pass


class EvaluationError(PalmFLError, ValueError):
    pass


class DatasetError(PalmFLError, ValueError):
    pass


class PGMParseError(DatasetError):
    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason
