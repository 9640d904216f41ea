"""Pinhole projection, image Jacobian assembly and the visual-servo law.

Sign convention, fixed once for the whole package: the 2x6 row pair
returned by :func:`interaction_rows` maps the twist of the *scene
relative to the camera* to the pixel velocity of a feature.  A camera
moving with twist ``T`` sees the scene move with ``-T``, so the solver
in :func:`servo_twist` folds in that negation and returns the twist to
command the camera itself.  The closed loop, not any individual sign,
is the tested contract: the row pair must match the finite-difference
Jacobian of :func:`project` under scene twists, and applying the servo
output must shrink the pixel error.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, CameraError, DegenerateFeaturesError
from .geometry import CAMERA_CUR, Rotation, Twist, WORLD

MIN_DEPTH = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole parameters; focal lengths and principal point in pixels."""

    fx: float = 600.0
    fy: float = 600.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise CameraError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise CameraError("principal point must lie inside the image")


@dataclass(frozen=True)
class PixelFeature:
    """Image-plane feature with the depth reported by the RGB-D oracle."""

    u: float
    v: float
    z: float

    def __post_init__(self):
        if not np.isfinite([self.u, self.v, self.z]).all():
            raise CameraError("pixel feature has non-finite components")
        if self.z <= 0:
            raise CameraError(f"feature depth must be positive, got {self.z}")

    def inside(self, intr: Intrinsics) -> bool:
        return 0.0 <= self.u <= intr.width and 0.0 <= self.v <= intr.height


def project(point_cam, intr: Intrinsics) -> PixelFeature:
    """Project a camera-frame point to (u, v) pixels, keeping its depth."""
    p = np.asarray(point_cam, dtype=float).reshape(3)
    x, y, z = p
    if z <= MIN_DEPTH:
        raise BehindCameraError(f"point at z={z:.3e} is at or behind the optical plane")
    return PixelFeature(intr.cx + intr.fx * x / z, intr.cy + intr.fy * y / z, z)


def project_points(points_cam, intr: Intrinsics) -> np.ndarray:
    """Vectorised projection of an (N, 3) stack; returns (N, 2) pixels."""
    pts = np.asarray(points_cam, dtype=float).reshape(-1, 3)
    if np.any(pts[:, 2] <= MIN_DEPTH):
        raise BehindCameraError("at least one point is at or behind the optical plane")
    uv = np.empty((len(pts), 2))
    uv[:, 0] = intr.cx + intr.fx * pts[:, 0] / pts[:, 2]
    uv[:, 1] = intr.cy + intr.fy * pts[:, 1] / pts[:, 2]
    return uv


def interaction_rows(feat: PixelFeature, intr: Intrinsics) -> np.ndarray:
    """2x6 image Jacobian rows for one feature.

    Input pixels are as returned by :func:`project`; centering on the
    principal point happens here.  Columns follow twist order
    (vx, vy, vz, wx, wy, wz) of the scene relative to the camera.
    """
    if feat.z <= 0:
        raise CameraError("feature depth must be positive")
    u = feat.u - intr.cx
    v = feat.v - intr.cy
    z = feat.z
    fx, fy = intr.fx, intr.fy
    return np.array([
        [fx / z, 0.0, -u / z, -u * v / fy, (fx * fx + u * u) / fx, -fx * v / fy],
        [0.0, fy / z, -v / z, -(fy * fy + v * v) / fy, u * v / fx, fy * u / fx],
    ])


def stack_interaction(features, intr: Intrinsics) -> np.ndarray:
    return np.vstack([interaction_rows(f, intr) for f in features])


def servo_twist(current, target, intr: Intrinsics, gain: float = 1.0,
                damping: float = 1e-6, jacobian: str = "current") -> Twist:
    """Camera twist that drives current pixel features toward the target.

    Solves the damped least-squares problem for the stacked row pairs,
    with the desired image velocity proportional to the pixel error.
    ``jacobian`` selects the linearisation point: "current" features, or
    "mean" of the current and taught rows (better behaved under large
    rotations).  Raises for fewer than 3 features or when the stacked
    Jacobian is rank deficient below the damping floor.
    """
    current = list(current)
    target = list(target)
    if len(current) != len(target):
        raise CameraError("current and target feature lists differ in length")
    if len(current) < 3:
        raise CameraError("visual servo needs at least 3 features")
    err = np.concatenate([[c.u - t.u, c.v - t.v] for c, t in zip(current, target)])
    if not np.any(err):
        return Twist.zero(CAMERA_CUR)
    if jacobian == "current":
        jac = stack_interaction(current, intr)
    elif jacobian == "mean":
        jac = 0.5 * (stack_interaction(current, intr) +
                     stack_interaction(target, intr))
    else:
        raise CameraError(f"unknown jacobian mode '{jacobian}'")
    svals = np.linalg.svd(jac, compute_uv=False)
    floor = damping * svals[0] ** 2
    # true rank loss: the weakest direction sits far below the damping floor,
    # so its solution component would be pure regularisation artifact
    if svals[-1] ** 2 < 1e-4 * floor:
        raise DegenerateFeaturesError(
            f"feature configuration is degenerate (sv ratio {svals[-1] / svals[0]:.2e})")
    lhs = jac.T @ jac + floor * np.eye(6)
    sol = np.linalg.solve(lhs, jac.T @ (gain * err))
    return Twist(sol[:3], sol[3:], CAMERA_CUR)


def camera_twist_to_ee(twist: Twist, r_we: Rotation, r_ec: Rotation) -> Twist:
    """Re-express a camera-frame twist in the world frame via R_we R_ec."""
    if twist.frame not in (CAMERA_CUR, "c"):
        raise CameraError(f"expected a camera-frame twist, got frame '{twist.frame}'")
    r_wc = r_we @ r_ec
    return twist.rotated(r_wc, WORLD)
