"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage/config problems exit 2, stage
failures exit 1, everything healthy exits 0.
"""


class AutochargeError(Exception):
    """Base class for all package errors."""


# --- geometry ---------------------------------------------------------------

class GeometryError(AutochargeError, ValueError):
    pass


class FrameMismatchError(GeometryError):
    """Composed two frame-tagged values whose tags do not line up."""


class DegenerateGeometryError(GeometryError):
    """Inputs do not define the requested construction (parallel axes, ...)."""


# --- camera / servo ---------------------------------------------------------

class CameraError(AutochargeError, ValueError):
    pass


class BehindCameraError(CameraError):
    """Point at or behind the optical plane cannot be projected."""


class DegenerateFeaturesError(CameraError):
    """Stacked image Jacobian is rank deficient below the damping floor."""


class VisibilityError(CameraError):
    """A required feature is behind the camera or outside the image."""


# --- perception -------------------------------------------------------------

class PerceptionError(AutochargeError, ValueError):
    pass


class EmptyCloudError(PerceptionError):
    """An operation produced or received an empty point cloud."""


class ClusterConvergenceError(PerceptionError):
    """Normal clustering could not produce a usable split."""


class AmbiguousCoverError(PerceptionError):
    """Cluster sizes too similar to pick the cover reliably."""


# --- simulation -------------------------------------------------------------

class SimulationError(AutochargeError, ValueError):
    pass


class InvalidConfigError(SimulationError):
    pass


class TwistLimitError(SimulationError):
    """Commanded twist exceeds the safety caps."""


class WorkspaceExitError(SimulationError):
    """Peg left the allowed search workspace during insertion."""


# --- staged pipeline --------------------------------------------------------

class StageError(AutochargeError, RuntimeError):
    """Failure of one pipeline stage; carries the stage identity."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class EstimationFailureError(StageError):
    pass


class ForceLimitError(StageError):
    pass


class StageTimeoutError(StageError):
    pass


# --- CLI --------------------------------------------------------------------

class UsageError(AutochargeError, ValueError):
    """Bad command line arguments or configuration file contents."""
