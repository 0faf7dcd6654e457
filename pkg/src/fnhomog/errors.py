"""Exception types shared across the package."""


class ParameterError(ValueError):
    """Invalid parameters for a field, operator, grid or solver."""


class DomainError(ValueError):
    """A query point lies outside the region an object covers."""


class StencilError(ValueError):
    """A finite-difference stencil leaves the discrete domain."""


class IterationError(RuntimeError):
    """An iterative solver did not converge.

    ``history`` holds the residual sup-norms recorded along the way.
    """

    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = list(history)


class BudgetError(RuntimeError):
    """A requested resolution exceeds the configured grid budget."""


class DiagnosticError(RuntimeError):
    """A computed quantity violates a structural property it must satisfy."""


class PreconditionError(ValueError):
    """The hypotheses of a verification routine are not met."""
