"""Exception types shared across the pipeline."""


class ValidationError(ValueError):
    """Input violates a documented precondition or invariant."""


class TrainingError(RuntimeError):
    """Optimization produced a non-finite value."""
