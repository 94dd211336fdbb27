"""Exception types shared across the package."""


class PointOutsideDomainError(ValueError):
    """A query point lies outside the closed mesh domain."""


class NoConvergenceError(RuntimeError):
    """An iterative solver exhausted its budget.

    Carries the final residual and, for Newton, the residual history.
    """

    def __init__(self, message, residual=None, history=None):
        super().__init__(message)
        self.residual = residual
        self.history = list(history) if history is not None else None


class SingularMatrixError(RuntimeError):
    """Direct factorization met a matrix singular to working precision."""


class NonlinearityEvaluationError(RuntimeError):
    """A reaction-term callback produced NaN or infinity."""


class ConfigError(ValueError):
    """Configuration rejected; ``violations`` lists every failed invariant."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__(
            "invalid configuration (%d violation%s):\n  - %s"
            % (
                len(self.violations),
                "" if len(self.violations) == 1 else "s",
                "\n  - ".join(self.violations),
            )
        )
