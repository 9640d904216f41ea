"""Frames, rotations, rigid transforms and spatial velocities.

Every pose and twist is tagged with the frames it relates; composing
values whose tags do not line up raises :class:`FrameMismatchError`
instead of silently producing a wrong-frame result.  Silent frame bugs
are the dominant failure mode in this kind of pipeline, so the checks
run at construction and composition time.

Rotations are stored as plain 3x3 matrices.  Construction accepts
matrices that are off-orthonormal by up to ``INPUT_ORTHO_TOL`` (normals
estimated from noisy clouds never come in exactly orthogonal); such
inputs are re-orthonormalised by Gram-Schmidt and the result is flagged
via ``reorthonormalized``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, FrameMismatchError, GeometryError

# Canonical frame labels used throughout the package.
WORLD = "w"          # robot base
PLANE = "p"          # panel carrying the port
COVER = "b"          # charging cover
CAMERA = "c"         # wrist camera
EE = "e"             # end effector / tool point
AXIS = "a"           # hinge axis frame
IMAGE = "i"          # pixel coordinates
CAMERA_CUR = "c_cur"  # camera frame at the current servo step

INPUT_ORTHO_TOL = 1e-6
STRICT_ORTHO_TOL = 1e-9


def _as_vec3(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=float).reshape(-1)
    if arr.shape != (3,):
        raise GeometryError(f"{name} must have 3 components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError(f"{name} has non-finite components: {arr}")
    return arr


def _gram_schmidt(m: np.ndarray) -> np.ndarray:
    cols = []
    for j in range(3):
        v = m[:, j].copy()
        for u in cols:
            v -= (u @ v) * u
        n = np.linalg.norm(v)
        if n < 1e-12:
            raise DegenerateGeometryError("matrix columns are linearly dependent")
        cols.append(v / n)
    return np.column_stack(cols)


@dataclass(frozen=True)
class Rotation:
    """Proper 3x3 rotation. Immutable; safe to share between threads."""

    matrix: np.ndarray
    reorthonormalized: bool = False

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (3, 3):
            raise GeometryError(f"rotation must be 3x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise GeometryError("rotation has non-finite entries")
        err = np.abs(m.T @ m - np.eye(3)).max()
        reortho = bool(self.reorthonormalized)
        if err > INPUT_ORTHO_TOL:
            raise GeometryError(f"matrix is not orthonormal (|R'R - I| = {err:.3e})")
        if err > STRICT_ORTHO_TOL:
            m = _gram_schmidt(m)
            reortho = True
        if np.linalg.det(m) < 0:
            raise GeometryError("matrix has negative determinant (improper rotation)")
        m = m.copy()
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "reorthonormalized", reortho)

    # -- constructors ---------------------------------------------------
    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.eye(3))

    @classmethod
    def about_x(cls, angle: float) -> "Rotation":
        c, s = math.cos(angle), math.sin(angle)
        return cls(np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=float))

    @classmethod
    def about_y(cls, angle: float) -> "Rotation":
        c, s = math.cos(angle), math.sin(angle)
        return cls(np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=float))

    @classmethod
    def about_z(cls, angle: float) -> "Rotation":
        c, s = math.cos(angle), math.sin(angle)
        return cls(np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=float))

    @classmethod
    def exp(cls, omega) -> "Rotation":
        """Rodrigues map of a rotation vector (axis * angle, radians)."""
        w = _as_vec3(omega, "rotation vector")
        angle = float(np.linalg.norm(w))
        if angle < 1e-12:
            k = skew(w)
            return cls(np.eye(3) + k + 0.5 * (k @ k))
        axis = w / angle
        k = skew(axis)
        m = np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)
        return cls(m)

    # -- algebra ---------------------------------------------------------
    def __matmul__(self, other: "Rotation") -> "Rotation":
        if not isinstance(other, Rotation):
            return NotImplemented
        return Rotation(self.matrix @ other.matrix,
                        reorthonormalized=self.reorthonormalized or other.reorthonormalized)

    def apply(self, vec) -> np.ndarray:
        """Rotate one vector or an (N, 3) stack of vectors."""
        arr = np.asarray(vec, dtype=float)
        return arr @ self.matrix.T

    def inverse(self) -> "Rotation":
        return Rotation(self.matrix.T, reorthonormalized=self.reorthonormalized)

    def angle_to(self, other: "Rotation") -> float:
        """Geodesic angle between two rotations, radians."""
        rel = self.matrix.T @ other.matrix
        c = (np.trace(rel) - 1.0) / 2.0
        return math.acos(min(1.0, max(-1.0, c)))


def skew(v) -> np.ndarray:
    x, y, z = _as_vec3(v)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping points in ``frames[1]`` into ``frames[0]``.

    ``H_ab`` carries ``frames=(a, b)`` and acts as ``p_a = R p_b + t``.
    """

    rotation: Rotation
    translation: np.ndarray
    frames: tuple[str, str]

    def __post_init__(self):
        t = _as_vec3(self.translation, "translation").copy()
        t.flags.writeable = False
        object.__setattr__(self, "translation", t)
        if len(self.frames) != 2:
            raise GeometryError("pose frames must be a (from, to) pair")
        object.__setattr__(self, "frames", (str(self.frames[0]), str(self.frames[1])))

    @classmethod
    def identity(cls, frame: str = WORLD) -> "Pose":
        return cls(Rotation.identity(), np.zeros(3), (frame, frame))

    @classmethod
    def from_matrix(cls, m, frames: tuple[str, str]) -> "Pose":
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4) or np.abs(m[3] - [0, 0, 0, 1]).max() > 1e-9:
            raise GeometryError("expected a 4x4 homogeneous matrix")
        return cls(Rotation(m[:3, :3]), m[:3, 3], frames)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.matrix
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        return self.rotation.apply(points) + self.translation

    def compose(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def inverse(self) -> "Pose":
        return invert(self)


def compose(a: Pose, b: Pose) -> Pose:
    """Chain two transforms; requires ``a.frames[1] == b.frames[0]``."""
    if a.frames[1] != b.frames[0]:
        raise FrameMismatchError(
            f"cannot compose pose with frames {a.frames} onto {b.frames}")
    rot = a.rotation @ b.rotation
    t = a.translation + a.rotation.apply(b.translation)
    return Pose(rot, t, (a.frames[0], b.frames[1]))


def invert(p: Pose) -> Pose:
    rot = p.rotation.inverse()
    return Pose(rot, -rot.apply(p.translation), (p.frames[1], p.frames[0]))


@dataclass(frozen=True)
class Twist:
    """Spatial velocity: linear m/s and angular rad/s, in a named frame."""

    linear: np.ndarray
    angular: np.ndarray
    frame: str = WORLD

    def __post_init__(self):
        lin = _as_vec3(self.linear, "linear velocity").copy()
        ang = _as_vec3(self.angular, "angular velocity").copy()
        lin.flags.writeable = False
        ang.flags.writeable = False
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "angular", ang)

    @classmethod
    def zero(cls, frame: str = WORLD) -> "Twist":
        return cls(np.zeros(3), np.zeros(3), frame)

    def scaled(self, factor: float) -> "Twist":
        return Twist(self.linear * factor, self.angular * factor, self.frame)

    def rotated(self, rot: Rotation, frame: str) -> "Twist":
        return Twist(rot.apply(self.linear), rot.apply(self.angular), frame)


def rotation_from_axes(x_axis, y_axis, z_axis) -> Rotation:
    """Assemble a rotation whose columns are the three given unit axes.

    Inputs must be unit-norm and mutually orthogonal within 1e-6; small
    residuals are cleaned up by Gram-Schmidt and flagged on the result.
    """
    x = _as_vec3(x_axis, "x axis")
    y = _as_vec3(y_axis, "y axis")
    z = _as_vec3(z_axis, "z axis")
    for name, v in (("x", x), ("y", y), ("z", z)):
        if abs(np.linalg.norm(v) - 1.0) > INPUT_ORTHO_TOL:
            raise DegenerateGeometryError(f"{name} axis is not unit length")
    for (na, a), (nb, b) in (((("x"), x), (("y"), y)),
                             ((("y"), y), (("z"), z)),
                             ((("x"), x), (("z"), z))):
        if abs(a @ b) > INPUT_ORTHO_TOL:
            raise DegenerateGeometryError(f"{na} and {nb} axes are not orthogonal")
    return Rotation(np.column_stack([x, y, z]))


def cover_x_axis(y_axis, z_axis) -> np.ndarray:
    """Third axis of the cover frame: cross product of its y and z axes."""
    y = _as_vec3(y_axis, "y axis")
    z = _as_vec3(z_axis, "z axis")
    x = np.cross(y, z)
    n = np.linalg.norm(x)
    if n < 1e-9:
        raise DegenerateGeometryError("axes are parallel; cover orientation undefined")
    return x / n
