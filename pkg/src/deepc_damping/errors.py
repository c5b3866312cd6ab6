"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array or trajectory dimensions do not match the model or data layout."""


class ObservabilityError(ValueError):
    """The model is not observable, so no finite lag exists."""


class PersistencyError(ValueError):
    """Collected input data is not persistently exciting of the required order."""


class NotReadyError(RuntimeError):
    """The initial-trajectory buffer does not yet hold T_ini samples."""


class SolverError(RuntimeError):
    """An optimization did not reach an optimal status.

    The offending solution (or robust result) is kept on ``.solution`` so
    callers can inspect residuals before deciding what to do.
    """

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


class VertexLimitError(ValueError):
    """Vertex enumeration of the disturbance box would exceed the cap."""


class ScenarioError(ValueError):
    """A scenario is internally inconsistent."""
