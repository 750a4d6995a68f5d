"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument failed a documented precondition (wrong shape, empty input, ...)."""


class SceneGenerationError(RuntimeError):
    """Rejection sampling for a scene exhausted its attempt budget."""
