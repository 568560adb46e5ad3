"""Exception hierarchy shared by all modules."""


class MagelasticError(Exception):
    """Base class for every error raised by the package."""


class DegenerateDeformationError(MagelasticError):
    """det(grad y) fell below the admissible floor somewhere."""

    def __init__(self, min_det, location, floor=None):
        self.min_det = float(min_det)
        self.location = location
        self.floor = floor
        msg = f"degenerate deformation: min det = {self.min_det:.6g} at {location}"
        if floor is not None:
            msg += f" (floor {floor})"
        super().__init__(msg)


class DegenerateStateError(MagelasticError):
    """A nodal magnetization vector is zero and cannot be normalized."""


class BoxOverflowError(MagelasticError):
    """The deformed body leaves the embedding box."""


class MeshMismatchError(MagelasticError):
    """Two fields or states live on different meshes."""


class SolverError(MagelasticError):
    """An iterative solver failed; carries its diagnostics."""

    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class LineSearchError(SolverError):
    pass


class ContinuationError(SolverError):
    pass


class ScenarioError(MagelasticError):
    """Invalid scenario document (parse or validation failure)."""
