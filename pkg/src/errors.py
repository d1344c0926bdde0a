class LabError(Exception):
    """Base class for every error raised by the compression lab."""


# tensorcore
class InvalidShapeError(LabError, ValueError):
    pass


class ConformanceError(LabError, ValueError):
    pass


class ParameterError(LabError, ValueError):
    pass


class InvalidRootError(LabError, ValueError):
    pass


# targetgen / exacteval
class SpecError(LabError, ValueError):
    pass


class RangeError(LabError, IndexError):
    pass


class EnumerationTooLargeError(LabError, ValueError):
    pass


class ModelContractError(LabError, ValueError):
    pass


class InfiniteDivergenceError(LabError, ArithmeticError):
    """
    Raised when a model assigns zero probability to a sequence in the target's support.
    The divergence is infinite, which is a property of the pair, not a numeric failure.
    """

    def __init__(self, sequence_id):
        self.sequence_id = sequence_id
        super().__init__(
            f"model assigns zero probability to supported sequence id {sequence_id}"
        )


# modelzoo / optim
class ConfigError(LabError, ValueError):
    pass


class StrictParseError(ConfigError):
    pass


class UnsupportedVariantError(ConfigError):
    pass


class PoisonedStateError(LabError, FloatingPointError):
    pass


# probes / runner
class UnsupportedProbeError(LabError, TypeError):
    pass


class EmptyTailError(LabError, ValueError):
    pass


class TrainingAbortedError(LabError, RuntimeError):
    def __init__(self, message, records=None):
        super().__init__(message)
        self.records = records if records is not None else []
