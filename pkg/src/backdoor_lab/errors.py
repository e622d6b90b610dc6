"""Exception hierarchy. Each family maps to a distinct CLI exit code."""


class LabError(Exception):
    exit_code = 1


class ConfigurationError(LabError):
    exit_code = 2


class IngestionError(LabError):
    exit_code = 3


class TrainingError(LabError):
    exit_code = 4

    def __init__(self, message, iteration=None, snapshot=None):
        super().__init__(message if iteration is None else f"{message} (iteration {iteration})")
        self.iteration = iteration
        self.snapshot = snapshot


class MeasurementError(LabError):
    exit_code = 5


class ContractError(LabError, ValueError):
    """Precondition violated by the caller (shapes, bounds, missing params)."""

    exit_code = 6


class PlacementError(ContractError):
    pass


class PoisoningError(LabError):
    exit_code = 7


class OptimizationError(TrainingError):
    pass


class FittingError(MeasurementError):
    pass
