"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid mesh/partition/scenario configuration."""


class ParameterError(ValueError):
    """Physical parameter violates a model requirement (e.g. loss of coercivity)."""


class FieldSynthesisFailed(RuntimeError):
    """Multiplier-field synthesis infeasible; carries the best achieved bound."""

    def __init__(self, message, best_delta=None):
        super().__init__(message)
        self.best_delta = best_delta


class IntegratorError(RuntimeError):
    """Time integration failed (solver breakdown or NaN state)."""

    def __init__(self, message, step=None, time=None):
        super().__init__(message)
        self.step = step
        self.time = time


class DiagnosticError(RuntimeError):
    """A diagnostic could not be evaluated (e.g. too few samples)."""


class FitError(RuntimeError):
    """Decay-rate fit failed (nonpositive values or too few points)."""


class ExperimentPreconditionError(ValueError):
    """Scenario violates an experiment's stated preconditions."""


class ExperimentFailed(RuntimeError):
    """Experiment ran but its verification verdict is negative."""
