"""Exception hierarchy. Every error carries a stable machine-readable ``reason``."""


class SpectrumError(Exception):
    reason = "error"


class ConfigError(SpectrumError, ValueError):
    reason = "parse"


class InvalidProfileError(SpectrumError, ValueError):
    reason = "invalid-profile"


class MonitoringInfeasibleError(SpectrumError):
    """The error std is too large for the false-alarm budget: no positive intermediate limit exists."""

    reason = "monitoring-infeasible"


class ConstraintViolatedError(SpectrumError):
    reason = "constraint-violated"


class DegeneratePlayerError(SpectrumError):
    reason = "degenerate-player"


class DegenerateGridError(SpectrumError):
    reason = "degenerate-grid"


class Condition1Error(SpectrumError):
    reason = "condition1-violated"

    def __init__(self, message, pair=None):
        super().__init__(message)
        self.pair = pair


class Condition2Error(SpectrumError):
    reason = "condition2-violated"


class EmptySetError(SpectrumError):
    reason = "empty-set"


class DesignInfeasibleError(SpectrumError):
    reason = "design-infeasible"


class NumericDomainError(SpectrumError):
    reason = "numeric-domain"


class DecompositionError(SpectrumError):
    reason = "decomposition-failure"


class StateEscapeError(SpectrumError):
    reason = "state-escape"


class PatienceError(SpectrumError):
    """Discount factor below the minimum needed for the equilibrium set."""

    reason = "insufficient-patience"

    def __init__(self, message, delta_min=None):
        super().__init__(message)
        self.delta_min = delta_min
