"""Exception hierarchy for deersim."""
from typing import Iterable, List, Optional


class DeerSimError(Exception):
    """Base exception for deersim errors."""
    pass


class DomainError(DeerSimError, ValueError):
    """Argument outside the domain of a formula."""
    pass


class CouplingError(DomainError):
    """Dipolar coupling requested for coincident positions."""
    pass


class SamplingError(DeerSimError):
    """Spin positions could not be placed under the packing constraint."""
    pass


class ConstraintError(DeerSimError, ValueError):
    """Sequence or sweep constraint violated."""

    def __init__(self, message: str, offenders: Optional[Iterable] = None):
        super().__init__(message)
        self.offenders = list(offenders) if offenders is not None else []


class CapacityError(DeerSimError):
    """Target Hilbert space larger than the configured limit."""
    pass


class NumericalIntegrityError(DeerSimError):
    """A propagator drifted away from unitarity."""
    pass


class IntegrationError(DeerSimError):
    """Bloch integration could not choose a usable step."""
    pass


class AccuracyError(DeerSimError):
    """Quadrature did not reach the requested tolerance."""

    def __init__(self, message: str, achieved: float):
        super().__init__(message)
        self.achieved = achieved


class ParameterError(DeerSimError, ValueError):
    """Invalid analysis parameter."""
    pass


class AlignmentError(DeerSimError):
    """Curves cannot be put on a common sweep grid."""
    pass


class ConfigValidationError(DeerSimError):
    """Experiment configuration failed validation."""

    def __init__(self, violations: List[str]):
        self.violations = list(violations)
        summary = "; ".join(self.violations)
        super().__init__(f"Invalid configuration ({len(self.violations)} problem(s)): {summary}")
