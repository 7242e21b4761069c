"""Exception hierarchy shared across the package."""


class RareBiasError(Exception):
    """Base class for all package errors."""


class ConfigurationError(RareBiasError, ValueError):
    pass


class SearchFailure(RareBiasError):
    """No local minimum converged during ``find_minima``."""


class NumericOverflowError(RareBiasError, FloatingPointError):
    """Non-finite activation in the bias network (runaway parameters)."""


class SimulationDiverged(RareBiasError):
    def __init__(self, step: int, index: int | None = None):
        self.step = step
        self.index = index
        where = f" (trajectory {index})" if index is not None else ""
        super().__init__(f"simulation diverged at step {step}{where}")


class ContractViolation(RareBiasError, ValueError):
    """Caller broke a documented precondition (shapes, empty inputs)."""


class TrainingUnstable(RareBiasError):
    pass


class EstimatorError(RareBiasError, ValueError):
    """Undefined diagnostic (e.g. ESS of all-zero weights, CV with zero mean)."""


class CommittorSolveError(RareBiasError):
    def __init__(self, message: str, residuals: list[float]):
        self.residuals = residuals
        super().__init__(message)


class DatasetError(RareBiasError, ValueError):
    pass


class UnsupportedVersion(DatasetError):
    pass


class MergeConflict(DatasetError):
    def __init__(self, mismatched: dict):
        self.mismatched = mismatched
        fields = ", ".join(f"{k}: {a!r} != {b!r}" for k, (a, b) in mismatched.items())
        super().__init__(f"incompatible datasets ({fields})")


class OutOfDomain(RareBiasError, ValueError):
    pass
