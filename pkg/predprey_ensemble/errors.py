class PredPreyError(Exception):
    """Base class for every error raised by predprey_ensemble."""


class InvalidParameterError(PredPreyError, ValueError):
    pass


class ConfigError(PredPreyError):
    """
    Invalid experiment configuration.

    :param message: Human readable description.
    :param key: The offending key, when known.
    :param line: 1-based line of the key in the config file, when known.
    """

    def __init__(self, message: str, key: str = None, line: int = None):
        self.key = key
        self.line = line
        location = ""
        if key is not None:
            location = f" key={key}"
            if line is not None:
                location += f" line={line}"
        super().__init__(f"{message}{location}")


class InvalidDimensionError(PredPreyError, ValueError):
    pass


class DegenerateSampleError(PredPreyError, ValueError):
    pass


class InfeasibleEventError(PredPreyError):
    pass


class CarryingCapacityError(PredPreyError, ValueError):
    pass


class EquilibriumUndefinedError(PredPreyError, ZeroDivisionError):
    pass


class LeapFailureError(PredPreyError):
    pass


class SolverInstabilityError(PredPreyError):
    pass


class InfeasibleEquilibriumError(PredPreyError, ValueError):
    pass


class StabilityError(PredPreyError):
    pass


class ResamplingError(PredPreyError, ValueError):
    pass


class FitError(PredPreyError):
    pass


class StateSpaceTooLargeError(PredPreyError):
    pass


class MeasurementError(PredPreyError):
    pass


class ExperimentError(PredPreyError):
    """Downstream failure wrapped with the experiment that triggered it."""

    def __init__(self, kind: str, cause: Exception):
        self.kind = kind
        self.cause = cause
        super().__init__(f"Experiment '{kind}' failed: {cause}")
