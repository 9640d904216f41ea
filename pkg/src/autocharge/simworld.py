"""Deterministic virtual scene and sensor oracles.

The scene is a panel carrying a recessed charging port, a hinged cover,
and a velocity-controlled 6-DoF end effector whose tool point is the
charger tip (the wrist camera is co-located with the tip).  Everything
is analytic: depth clouds come from ray casting, pixel features from
projecting the port's five surface circles, and the wrist wrench from a
quasi-static penalty contact model.  All randomness flows through
explicit generators, so identical (config, seed, command sequence) runs
are bitwise identical.

Conventions:

* The plane frame has z along the panel's outward normal and y along
  the hinge line; the cover frame keeps y on the hinge, x from hinge to
  centre, z along the cover's outward normal.
* Wrenches are the environment's force/torque on the peg, expressed in
  plane axes about the wrist sensor point; vertical compression reads
  positive.
* The cover holds any angle (pure hinge, no restoring torque) and is
  dragged open by a sticking contact at the charger tip; the hinge has
  a mechanical stop at 100 degrees.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .camera import Intrinsics, PixelFeature, project_points
from .errors import (InvalidConfigError, TwistLimitError, VisibilityError,
                     WorkspaceExitError)
from .geometry import (CAMERA, COVER, EE, PLANE, Pose, Rotation, Twist, WORLD,
                       invert)
from .perception import PointCloud

HOLE_SHAPES = ("circle", "square", "triangle", "hexagon", "slot", "cross")

MAX_LINEAR_SPEED = 0.5   # m/s safety cap
MAX_ANGULAR_SPEED = 1.0  # rad/s safety cap
MAX_COVER_ANGLE = math.radians(100.0)

# planar insertion actions, indexed 0..3: +x, -x, +y, -y
ACTION_DELTAS = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
ACTION_NAMES = ("+x", "-x", "+y", "-y")
ACTION_STEP = 0.001  # m per planar move


# --------------------------------------------------------------------------
# Hole cross-sections as exact signed distance fields (negative inside)
# --------------------------------------------------------------------------

def _sdf_circle(p: np.ndarray, a: float) -> np.ndarray:
    return np.linalg.norm(p, axis=-1) - a


def _sdf_box(p: np.ndarray, half) -> np.ndarray:
    d = np.abs(p) - np.asarray(half)
    outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
    inside = np.minimum(np.maximum(d[..., 0], d[..., 1]), 0.0)
    return outside + inside


def _sdf_hexagon(p: np.ndarray, a: float) -> np.ndarray:
    # regular hexagon with apothem a (flat sides left/right of +y axis)
    kx, ky, kz = -0.866025403784439, 0.5, 0.577350269189626
    q = np.abs(np.asarray(p, dtype=float))
    dot = np.minimum(kx * q[..., 0] + ky * q[..., 1], 0.0)
    q = q - 2.0 * dot[..., None] * np.array([kx, ky])
    q0 = q[..., 0] - np.clip(q[..., 0], -kz * a, kz * a)
    q1 = q[..., 1] - a
    return np.sqrt(q0 * q0 + q1 * q1) * np.sign(q1)


def _sdf_triangle(p: np.ndarray, a: float) -> np.ndarray:
    # equilateral triangle with inradius a
    r = a * math.sqrt(3.0)
    k = math.sqrt(3.0)
    px = np.abs(np.asarray(p, dtype=float)[..., 0]) - r
    py = np.asarray(p, dtype=float)[..., 1] + r / k
    flip = px + k * py > 0.0
    px2 = (px - k * py) / 2.0
    py2 = (-k * px - py) / 2.0
    px = np.where(flip, px2, px)
    py = np.where(flip, py2, py)
    px = px - np.clip(px, -2.0 * r, 0.0)
    return -np.sqrt(px * px + py * py) * np.sign(py)


def _sdf_slot(p: np.ndarray, a: float) -> np.ndarray:
    # stadium of half-length 1.5a along x, half-width a
    q = np.asarray(p, dtype=float).copy()
    q[..., 0] = q[..., 0] - np.clip(q[..., 0], -1.5 * a, 1.5 * a)
    return np.linalg.norm(q, axis=-1) - a


def _sdf_cross(p: np.ndarray, a: float) -> np.ndarray:
    return np.minimum(_sdf_box(p, (3.0 * a, a)), _sdf_box(p, (a, 3.0 * a)))


_SDF_FUNCS = {
    "circle": _sdf_circle,
    "square": lambda p, a: _sdf_box(p, (a, a)),
    "triangle": _sdf_triangle,
    "hexagon": _sdf_hexagon,
    "slot": _sdf_slot,
    "cross": _sdf_cross,
}


@dataclass(frozen=True)
class HoleGeometry:
    """Hole cross-section (sized by inradius so a common peg fits), depth, chamfer."""

    shape: str = "circle"
    inradius: float = 0.012
    depth: float = 0.010
    chamfer: float = 0.00025

    def __post_init__(self):
        if self.shape not in _SDF_FUNCS:
            raise InvalidConfigError(f"unknown hole shape '{self.shape}'")
        if self.inradius <= 0 or self.depth <= 0 or self.chamfer < 0:
            raise InvalidConfigError("hole dimensions must be positive")

    def sdf(self, xy) -> np.ndarray:
        return _SDF_FUNCS[self.shape](np.asarray(xy, dtype=float), self.inradius)

    def grad(self, xy, h: float = 1e-7) -> np.ndarray:
        p = np.asarray(xy, dtype=float).reshape(2)
        gx = (self.sdf(p + [h, 0.0]) - self.sdf(p - [h, 0.0])) / (2 * h)
        gy = (self.sdf(p + [0.0, h]) - self.sdf(p - [0.0, h])) / (2 * h)
        g = np.array([float(gx), float(gy)])
        n = np.linalg.norm(g)
        return g / n if n > 0 else np.array([1.0, 0.0])


# --------------------------------------------------------------------------
# Scene configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneConfig:
    cover_angle_deg: float = 45.0
    cover_radius: float = 0.04
    cover_thickness: float = 0.004
    port_radius: float = 0.012
    peg_clearance: float = 0.00025
    hole_shape: str = "circle"
    hole_depth: float = 0.010
    chamfer: float = 0.00025
    plane_half_extent: float = 0.2
    plane_yaw_deg: float = 0.0
    plane_position: tuple = (0.0, 0.0, 0.0)
    noise_depth: float = 0.001
    pixel_noise: float = 0.5
    edge_dropout: float = 0.15
    edge_dropout_mode: str = "uniform"   # or "sector"
    edge_band_ratio: float = 0.55
    move_noise: float = 0.00015          # actuation jitter per planar move, m
    wrench_noise_force: float = 0.2      # N
    wrench_noise_torque: float = 0.02    # N*m
    k_contact: float = 5000.0            # N/m normal penalty stiffness
    k_rim: float = 3000.0                # N/m rim funnel stiffness
    k_stick: float = 600.0               # N/m tangential sticking stiffness
    damping: float = 50.0                # N*s/m vertical contact damping
    peg_length: float = 0.15             # tip-to-sensor lever arm, m
    tip_radius: float = 0.005            # rim-capture slop for the probe tip
    seed: int = 0

    def __post_init__(self):
        if self.cover_radius <= 0 or self.port_radius <= 0:
            raise InvalidConfigError("radii must be positive")
        if not 0.0 <= self.edge_dropout <= 1.0:
            raise InvalidConfigError("edge_dropout must be in [0, 1]")
        if self.edge_dropout_mode not in ("uniform", "sector"):
            raise InvalidConfigError(f"bad edge_dropout_mode '{self.edge_dropout_mode}'")
        if self.hole_shape not in HOLE_SHAPES:
            raise InvalidConfigError(f"unknown hole shape '{self.hole_shape}'")
        if not 0.0 <= self.cover_angle_deg <= 100.0:
            raise InvalidConfigError("cover angle must be within [0, 100] degrees")
        if self.port_radius <= self.peg_clearance:
            raise InvalidConfigError("port radius must exceed the peg clearance")


@dataclass(frozen=True)
class Engagement:
    """Sticking contact of the charger tip on the cover's inner face."""

    bx: float          # tip x in cover frame at engagement
    by: float          # tip y in cover frame at engagement
    phi_offset: float  # tip hinge angle minus cover angle at engagement


@dataclass(frozen=True)
class WorldState:
    ee_pose: Pose
    cover_angle: float = 0.0
    time: float = 0.0
    engagement: Engagement | None = None
    in_bore: bool = False     # peg entered the hole mouth and sits below surface
    wrench: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def __post_init__(self):
        if not 0.0 <= self.cover_angle <= MAX_COVER_ANGLE + 1e-9:
            raise InvalidConfigError(
                f"cover angle {math.degrees(self.cover_angle):.1f} deg out of range")
        w = np.asarray(self.wrench, dtype=float).reshape(6)
        object.__setattr__(self, "wrench", w)


# equal-area polar quadrature over the unit disc, used for rim-overlap stats
def _disc_grid(n_r: int = 8, n_t: int = 24) -> np.ndarray:
    radii = np.sqrt((np.arange(n_r) + 0.5) / n_r)
    theta = (np.arange(n_t) + 0.5) * (2.0 * math.pi / n_t)
    rr, tt = np.meshgrid(radii, theta, indexing="ij")
    return np.column_stack([(rr * np.cos(tt)).ravel(), (rr * np.sin(tt)).ravel()])


_DISC_GRID = _disc_grid()

_LOOKDOWN = Rotation(np.array([[1.0, 0.0, 0.0],
                               [0.0, -1.0, 0.0],
                               [0.0, 0.0, -1.0]]))


class Scene:
    """Static geometry plus sensor and contact oracles for one configuration."""

    def __init__(self, cfg: SceneConfig):
        self.cfg = cfg
        yaw = math.radians(cfg.plane_yaw_deg)
        self.plane_pose = Pose(Rotation.about_z(yaw),
                               np.asarray(cfg.plane_position, dtype=float),
                               (WORLD, PLANE))
        self.hole = HoleGeometry(cfg.hole_shape, cfg.port_radius,
                                 cfg.hole_depth, cfg.chamfer)
        self.peg_radius = cfg.port_radius - cfg.peg_clearance
        # hinge line in plane coordinates: through (-r_b, 0, 0) along +y
        self.hinge_origin_p = np.array([-cfg.cover_radius, 0.0, 0.0])
        # port surface circles used as servo features (plane frame, z = 0);
        # spread wide on the fixture, staying under the cover footprint
        r_feat = cfg.port_radius + 0.025
        angles = np.radians([0.0, 70.0, 150.0, 230.0, 300.0])
        self.feature_points_p = np.column_stack([
            r_feat * np.cos(angles), r_feat * np.sin(angles), np.zeros(5)])
        self.intrinsics = Intrinsics()
        self.perception_standoff = 0.40
        self.servo_standoff = 0.10
        self._target_features = None

    # -- frames and ground truth --------------------------------------

    def to_world(self, pts_p) -> np.ndarray:
        return self.plane_pose.apply(pts_p)

    def to_plane(self, pts_w) -> np.ndarray:
        return invert(self.plane_pose).apply(pts_w)

    @property
    def feature_points_w(self) -> np.ndarray:
        return self.to_world(self.feature_points_p)

    @property
    def hinge_origin_w(self) -> np.ndarray:
        return self.plane_pose.apply(self.hinge_origin_p)

    @property
    def hinge_dir_w(self) -> np.ndarray:
        return self.plane_pose.rotation.matrix[:, 1]

    def cover_pose_world(self, angle: float) -> Pose:
        """Ground-truth cover pose at a hinge angle (0 = closed/flush)."""
        r_b = self.cfg.cover_radius
        c, s = math.cos(angle), math.sin(angle)
        x_axis = np.array([c, 0.0, s])
        y_axis = np.array([0.0, 1.0, 0.0])
        z_axis = np.array([-s, 0.0, c])
        rot_p = Rotation(np.column_stack([x_axis, y_axis, z_axis]))
        center_p = self.hinge_origin_p + r_b * x_axis
        pose_p = Pose(rot_p, center_p, (PLANE, COVER))
        return self.plane_pose.compose(pose_p)

    def camera_pose(self, standoff: float) -> Pose:
        """Camera above the port, optical axis into the panel."""
        pos_p = np.array([0.0, 0.0, standoff])
        pose_p = Pose(_LOOKDOWN, pos_p, (PLANE, CAMERA))
        return self.plane_pose.compose(pose_p)

    @property
    def perception_camera_pose(self) -> Pose:
        return self.camera_pose(self.perception_standoff)

    @property
    def servo_target_pose(self) -> Pose:
        return self.camera_pose(self.servo_standoff)

    def target_features(self) -> list[PixelFeature]:
        """Taught feature pattern: noiseless render from the servo target pose."""
        if self._target_features is None:
            self._target_features = self.render_features(
                self.servo_target_pose, pixel_noise=0.0, rng=None)
        return self._target_features

    # -- sensors --------------------------------------------------------

    def sample_depth_cloud(self, state: WorldState, camera_pose: Pose,
                           rng: np.random.Generator, stride: int = 6) -> PointCloud:
        """Ray-cast RGB-D sample: panel, port bottom and cover outer face.

        Gaussian noise of ``noise_depth`` is applied along each ray; an
        edge band of the cover is thinned according to the dropout
        settings.  Deterministic for a given generator state.
        """
        cfg = self.cfg
        intr = self.intrinsics
        us = np.arange(stride // 2, intr.width, stride, dtype=float)
        vs = np.arange(stride // 2, intr.height, stride, dtype=float)
        uu, vv = np.meshgrid(us, vs, indexing="xy")
        dirs_c = np.column_stack([
            ((uu - intr.cx) / intr.fx).ravel(),
            ((vv - intr.cy) / intr.fy).ravel(),
            np.ones(uu.size)])
        dirs_c /= np.linalg.norm(dirs_c, axis=1, keepdims=True)
        r_wc = camera_pose.rotation
        origin = camera_pose.translation
        dirs_w = r_wc.apply(dirs_c)

        # work in plane coordinates
        o_p = self.to_plane(origin)
        d_p = self.plane_pose.rotation.inverse().apply(dirs_w)

        n_rays = len(d_p)
        best_t = np.full(n_rays, np.inf)
        on_cover = np.zeros(n_rays, bool)
        cover_rho = np.zeros(n_rays)
        cover_az = np.zeros(n_rays)

        # cover outer face
        cover_pose_p = Pose(self.cover_pose_world(state.cover_angle).rotation,
                            np.zeros(3), (WORLD, COVER))
        r_pb = self.plane_pose.rotation.inverse() @ cover_pose_p.rotation
        center_p = self.hinge_origin_p + self.cfg.cover_radius * r_pb.matrix[:, 0]
        n_b = r_pb.matrix[:, 2]
        denom = d_p @ n_b
        with np.errstate(divide="ignore", invalid="ignore"):
            t_cov = ((center_p - o_p) @ n_b) / denom
        hit = (np.abs(denom) > 1e-9) & (t_cov > 0.01)
        pts = o_p[None, :] + t_cov[:, None] * d_p
        local = (pts - center_p) @ r_pb.matrix
        rho = np.hypot(local[:, 0], local[:, 1])
        hit &= rho <= cfg.cover_radius
        upd = hit & (t_cov < best_t)
        best_t[upd] = t_cov[upd]
        on_cover[upd] = True
        cover_rho[upd] = rho[upd]
        cover_az[upd] = np.arctan2(local[upd, 1], local[upd, 0])

        # panel surface and port bottom
        with np.errstate(divide="ignore", invalid="ignore"):
            t_pan = -o_p[2] / d_p[:, 2]
        ok = (np.abs(d_p[:, 2]) > 1e-9) & (t_pan > 0.01)
        ppts = o_p[None, :] + t_pan[:, None] * d_p
        in_rect = (np.abs(ppts[:, 0]) <= cfg.plane_half_extent) & \
                  (np.abs(ppts[:, 1]) <= cfg.plane_half_extent)
        sd = self.hole.sdf(ppts[:, :2])
        panel_hit = ok & in_rect & (sd >= 0)
        upd = panel_hit & (t_pan < best_t)
        best_t[upd] = t_pan[upd]
        on_cover[upd] = False

        with np.errstate(divide="ignore", invalid="ignore"):
            t_bot = (-cfg.hole_depth - o_p[2]) / d_p[:, 2]
        okb = (np.abs(d_p[:, 2]) > 1e-9) & (t_bot > 0.01)
        bpts = o_p[None, :] + t_bot[:, None] * d_p
        sdb = self.hole.sdf(bpts[:, :2])
        bottom_hit = okb & ok & in_rect & (sd < 0) & (sdb < 0)
        upd = bottom_hit & (t_bot < best_t)
        best_t[upd] = t_bot[upd]
        on_cover[upd] = False

        keep = np.isfinite(best_t)
        if not keep.any():
            from .errors import EmptyCloudError
            raise EmptyCloudError("camera does not view the scene")

        # edge dropout of the cover rim band
        if cfg.edge_dropout > 0:
            band = on_cover & (cover_rho > cfg.edge_band_ratio * cfg.cover_radius)
            if cfg.edge_dropout_mode == "uniform":
                drop = band & (rng.random(n_rays) < cfg.edge_dropout)
            else:
                sector_center = rng.uniform(-math.pi, math.pi)
                half_width = cfg.edge_dropout * math.pi
                delta = np.angle(np.exp(1j * (cover_az - sector_center)))
                drop = band & (np.abs(delta) <= half_width)
            keep &= ~drop

        t_final = best_t[keep] + rng.normal(0.0, cfg.noise_depth, keep.sum())
        pts_p = o_p[None, :] + t_final[:, None] * d_p[keep]
        pts_w = self.to_world(pts_p)
        pts_c = invert(camera_pose).apply(pts_w)
        return PointCloud(pts_c, frame=CAMERA)

    def render_features(self, camera_pose: Pose, pixel_noise: float | None = None,
                        rng: np.random.Generator | None = None) -> list[PixelFeature]:
        """Project the five port circles; stable order; noise optional."""
        sigma = self.cfg.pixel_noise if pixel_noise is None else pixel_noise
        pts_c = invert(camera_pose).apply(self.feature_points_w)
        if np.any(pts_c[:, 2] <= 1e-6):
            raise VisibilityError("a port feature lies behind the camera")
        uv = project_points(pts_c, self.intrinsics)
        if sigma > 0:
            if rng is None:
                raise InvalidConfigError("pixel noise requested without a generator")
            uv = uv + rng.normal(0.0, sigma, uv.shape)
        feats = []
        for (u, v), z in zip(uv, pts_c[:, 2]):
            f = PixelFeature(float(u), float(v), float(z))
            if not f.inside(self.intrinsics):
                raise VisibilityError("a port feature left the image")
            feats.append(f)
        return feats

    # -- contact models ---------------------------------------------------

    def _rim_overlap_stats(self, rel_xy: np.ndarray) -> tuple[float, np.ndarray]:
        """Fraction of the peg face over material and its centroid offset."""
        pts = rel_xy[None, :] + self.peg_radius * _DISC_GRID
        solid = self.hole.sdf(pts) >= 0.0
        frac = float(solid.mean())
        if frac <= 0.0:
            return 0.0, np.zeros(2)
        centroid = self.peg_radius * _DISC_GRID[solid].mean(axis=0)
        return frac, centroid

    def ft_reading(self, state: WorldState, hole: HoleGeometry | None = None,
                   peg_pose: Pose | None = None, vertical_velocity: float = 0.0
                   ) -> np.ndarray:
        """Wrist wrench from peg-port contact (plane axes, about the sensor).

        Penalty model: vertical force stiffness times penetration plus
        viscous damping while approaching; a lateral rim force along the
        negative SDF gradient with magnitude proportional to the rim
        overlap; torques from the lever arms of both forces about the
        wrist.  Zero wrench whenever there is no geometric overlap.
        """
        hole = hole or self.hole
        pose = peg_pose or state.ee_pose
        tip_p = self.to_plane(pose.translation)
        x, y, z = tip_p
        wrench = np.zeros(6)
        if z >= 0.0:
            return wrench
        rel = np.array([x, y])
        s = float(hole.sdf(rel))
        r_p = self.peg_radius
        wrist = np.array([0.0, 0.0, self.cfg.peg_length])

        def add_force(force, point_rel_tip_xy):
            pt = np.array([x + point_rel_tip_xy[0], y + point_rel_tip_xy[1], z])
            arm = pt - (tip_p + wrist)
            wrench[:3] += force
            wrench[3:] += np.cross(arm, force)

        if s <= -(r_p - hole.chamfer):
            # peg fits through the chamfered mouth: bore regime.  The walls
            # resist lateral overlap; only the bottom resists vertically.
            wall = s + r_p
            if wall > 0:
                g = hole.grad(rel)
                lateral = self.cfg.k_rim * wall * (-g)
                contact = -s * g
                add_force(np.array([lateral[0], lateral[1], 0.0]), contact)
            if z <= -hole.depth:
                pen = -hole.depth - z
                fz = self.cfg.k_contact * pen + self.cfg.damping * max(0.0, -vertical_velocity)
                add_force(np.array([0.0, 0.0, fz]), np.zeros(2))
            return wrench

        pen = min(-z, 0.005)
        fz = self.cfg.k_contact * pen + self.cfg.damping * max(0.0, -vertical_velocity)
        frac, centroid = self._rim_overlap_stats(rel)
        if frac <= 0.0:
            centroid = np.zeros(2)
        add_force(np.array([0.0, 0.0, fz]), centroid)

        overlap = max(0.0, r_p - abs(s))
        if overlap > 0.0:
            g = hole.grad(rel)
            lateral = self.cfg.k_rim * overlap * (-g)
            contact = -s * g  # nearest boundary point relative to the tip
            add_force(np.array([lateral[0], lateral[1], 0.0]), contact)
        return wrench

    def _cover_contact(self, state: WorldState, tip_w: np.ndarray
                       ) -> tuple[np.ndarray, float, Engagement | None]:
        """Cover contact wrench, updated cover angle and engagement."""
        cfg = self.cfg
        angle = state.cover_angle
        cover = self.cover_pose_world(angle)
        b = invert(cover).apply(tip_w)
        bx, by, bz = b
        rho = math.hypot(bx, by)
        wrench = np.zeros(6)
        eng = state.engagement
        r_pb_w = cover.rotation.matrix  # columns are cover axes in world

        tip_plane = self.to_plane(tip_w)
        d = tip_plane - self.hinge_origin_p
        phi_tip = math.atan2(d[2], d[0])

        def world_to_plane_wrench(force_w, point_w):
            f_p = self.plane_pose.rotation.inverse().apply(force_w)
            wrist_p = tip_plane + np.array([0.0, 0.0, cfg.peg_length])
            arm = self.to_plane(point_w) - wrist_p
            wrench[:3] += f_p
            wrench[3:] += np.cross(arm, f_p)

        t_c = cfg.cover_thickness
        r_tip = cfg.tip_radius

        if eng is not None:
            if rho > cfg.cover_radius + 0.002:
                return wrench, angle, None          # slid off the free edge
            pen = bz + t_c + r_tip                  # tip sphere into the inner face
            if pen < -0.001:
                return wrench, angle, None          # pulled clear of the face
            new_angle = min(max(angle, phi_tip - eng.phi_offset), MAX_COVER_ANGLE)
            normal_w = -r_pb_w[:, 2]
            f_n = cfg.k_contact * max(pen, 0.0) * normal_w
            slip = np.array([bx - eng.bx, by - eng.by])
            f_t = r_pb_w[:, 0] * (-cfg.k_stick * slip[0]) + \
                r_pb_w[:, 1] * (-cfg.k_stick * slip[1])
            world_to_plane_wrench(f_n + f_t, tip_w)
            return wrench, new_angle, eng

        if rho < cfg.cover_radius and -t_c <= bz <= 0.0:
            # tip centre inside the slab: push out through the nearest face
            candidates = {"rim": cfg.cover_radius - rho,
                          "outer": -bz, "inner": bz + t_c}
            kind = min(candidates, key=candidates.get)
            pen = candidates[kind] + r_tip
            if kind == "rim":
                direction = r_pb_w[:, 0] * (bx / max(rho, 1e-12)) + \
                    r_pb_w[:, 1] * (by / max(rho, 1e-12))
            elif kind == "outer":
                direction = r_pb_w[:, 2]
            else:
                direction = -r_pb_w[:, 2]
            world_to_plane_wrench(cfg.k_contact * pen * direction, tip_w)
            if kind == "inner":
                eng = Engagement(bx=bx, by=by, phi_offset=phi_tip - angle)
            return wrench, angle, eng

        # sphere tip against the slab from outside
        dr = max(rho - cfg.cover_radius, 0.0)
        above = max(bz, 0.0)
        below = max(-t_c - bz, 0.0)
        dzo = above + below
        dist = math.hypot(dr, dzo)
        pen = r_tip - dist
        if pen <= 0.0 or dist <= 1e-12:
            return wrench, angle, None
        radial_w = r_pb_w[:, 0] * (bx / max(rho, 1e-12)) + \
            r_pb_w[:, 1] * (by / max(rho, 1e-12))
        face_w = r_pb_w[:, 2] if above > 0 else -r_pb_w[:, 2]
        direction = (radial_w * dr + face_w * dzo) / dist
        world_to_plane_wrench(cfg.k_contact * pen * direction, tip_w)
        if below > 0 and rho < cfg.cover_radius:
            eng = Engagement(bx=bx, by=by, phi_offset=phi_tip - angle)
        return wrench, angle, eng

    # -- dynamics ---------------------------------------------------------

    def step(self, state: WorldState, ee_twist: Twist, dt: float) -> WorldState:
        """Integrate the end effector by one velocity command.

        First-order position update, exponential-map rotation update.
        Twists above the safety caps are rejected.  Cover and port
        contacts are evaluated at the new pose.
        """
        if not 0.0 < dt <= 0.05:
            raise InvalidConfigError(f"dt={dt} outside (0, 0.05]")
        if ee_twist.frame != WORLD:
            raise TwistLimitError(f"step expects a world-frame twist, got '{ee_twist.frame}'")
        v = np.linalg.norm(ee_twist.linear)
        w = np.linalg.norm(ee_twist.angular)
        if v > MAX_LINEAR_SPEED + 1e-12 or w > MAX_ANGULAR_SPEED + 1e-12:
            raise TwistLimitError(f"twist ({v:.3f} m/s, {w:.3f} rad/s) exceeds safety caps")
        pose = state.ee_pose
        new_t = pose.translation + dt * ee_twist.linear
        new_r = Rotation.exp(dt * ee_twist.angular) @ pose.rotation
        new_pose = Pose(new_r, new_t, pose.frames)

        cover_w, new_angle, eng = self._cover_contact(
            replace(state, ee_pose=new_pose), new_t)
        port_w = self.ft_reading(replace(state, ee_pose=new_pose),
                                 vertical_velocity=float(ee_twist.linear[2]))
        return replace(state, ee_pose=new_pose, cover_angle=new_angle,
                       engagement=eng, wrench=cover_w + port_w,
                       time=state.time + dt)

    def set_ee_pose(self, state: WorldState, pose: Pose) -> WorldState:
        """Stage-transition repositioning (clears any sticking contact)."""
        return replace(state, ee_pose=pose, engagement=None, in_bore=False,
                       wrench=np.zeros(6))

    # -- insertion-phase kinematics ----------------------------------------

    def planar_move(self, state: WorldState, delta_xy, pi, rng: np.random.Generator | None,
                    substeps: int = 10, dt: float = 0.01,
                    workspace: float = 0.05) -> tuple[WorldState, np.ndarray]:
        """1 mm-scale planar move with concurrent vertical force regulation.

        The commanded displacement (plus actuation jitter when a
        generator is supplied) is interpolated over ``substeps`` ticks;
        each tick applies the PI vertical update and the chamfer
        capture-pull, then refreshes the wrench.  Raises
        WorkspaceExitError when the peg leaves the search box.
        """
        cfg = self.cfg
        delta = np.asarray(delta_xy, dtype=float).reshape(2).copy()
        if rng is not None and cfg.move_noise > 0:
            delta += rng.normal(0.0, cfg.move_noise, 2)
        tip_p = self.to_plane(state.ee_pose.translation)
        per = delta / substeps
        wrench = state.wrench
        t = state.time
        r_p = self.peg_radius
        wall_pen = 0.0002  # max lateral wall penetration once inside the bore
        in_bore = state.in_bore
        for _ in range(substeps):
            tip_p[0] += per[0]
            tip_p[1] += per[1]
            if abs(tip_p[0]) > workspace or abs(tip_p[1]) > workspace:
                raise WorkspaceExitError(
                    f"peg left the {workspace * 1000:.0f} mm workspace box")
            # once through the mouth, the bore walls block lateral escape
            if in_bore:
                s_new = float(self.hole.sdf(tip_p[:2]))
                excess = s_new - (-r_p + wall_pen)
                if excess > 0:
                    tip_p[:2] -= excess * self.hole.grad(tip_p[:2])
            fz = wrench[2]
            dz = pi.update(fz, dt)
            tip_p[2] -= dz
            tip_p[2] = max(tip_p[2], -self.hole.depth - 0.002)
            if in_bore and tip_p[2] > -1e-9:
                in_bore = False
            t += dt
            pose = Pose(state.ee_pose.rotation, self.to_world(tip_p),
                        state.ee_pose.frames)
            vstate = replace(state, ee_pose=pose)
            wrench = self.ft_reading(vstate, vertical_velocity=-dz / dt)
            if rng is not None:
                noise = np.concatenate([
                    rng.normal(0.0, cfg.wrench_noise_force, 3),
                    rng.normal(0.0, cfg.wrench_noise_torque, 3)])
            else:
                noise = np.zeros(6)
            wrench = wrench + noise
        # chamfer capture at the dwell point: a pressed peg whose edge rests
        # inside the chamfered mouth seats into the opening; a peg skating
        # across at full speed does not get caught
        for _ in range(6):
            s = float(self.hole.sdf(tip_p[:2]))
            if not (tip_p[2] < 0.0 and -r_p < s <= -(r_p - self.hole.chamfer)):
                break
            tip_p[:2] += 0.0002 * (-self.hole.grad(tip_p[:2]))
        if tip_p[2] < -0.0005 and \
                float(self.hole.sdf(tip_p[:2])) <= -r_p + wall_pen / 2:
            in_bore = True
        pose = Pose(state.ee_pose.rotation, self.to_world(tip_p), state.ee_pose.frames)
        vstate = replace(state, ee_pose=pose)
        wrench = self.ft_reading(vstate)
        if rng is not None:
            wrench = wrench + np.concatenate([
                rng.normal(0.0, cfg.wrench_noise_force, 3),
                rng.normal(0.0, cfg.wrench_noise_torque, 3)])
        new_state = replace(state, ee_pose=pose, wrench=wrench, time=t,
                            in_bore=in_bore)
        return new_state, wrench

    def planar_step(self, state: WorldState, action: int, pi,
                    rng: np.random.Generator | None = None,
                    substeps: int = 10, dt: float = 0.01,
                    workspace: float = 0.05) -> tuple[WorldState, np.ndarray]:
        """Discrete insertion action: 1 mm along one of the four planar axes."""
        if not 0 <= int(action) < 4:
            raise InvalidConfigError(f"action must be 0..3, got {action}")
        delta = ACTION_DELTAS[int(action)] * ACTION_STEP
        return self.planar_move(state, delta, pi, rng, substeps, dt, workspace)

    def insert_success(self, state: WorldState, fz_threshold: float = 1.0,
                       depth_threshold: float = 0.005) -> bool:
        tip_p = self.to_plane(state.ee_pose.translation)
        return tip_p[2] <= -depth_threshold and abs(state.wrench[2]) < fz_threshold

    def settled_insert_state(self, offset_xy, state: WorldState | None = None) -> WorldState:
        """Peg pressed on the surface at a planar offset, press equilibrium.

        Initialises the post-servo handoff analytically: tip at the
        offset, squeezed to the penetration that reads the 10 N setpoint
        (or resting at the surface when it is over the opening).
        """
        pen_eq = 10.0 / self.cfg.k_contact
        off = np.asarray(offset_xy, dtype=float).reshape(2)
        s = float(self.hole.sdf(off))
        z0 = -pen_eq if s > -self.peg_radius else 0.0
        tip_p = np.array([off[0], off[1], z0])
        pose = Pose(_LOOKDOWN, self.to_world(tip_p), (WORLD, EE))
        base = state if state is not None else WorldState(
            ee_pose=pose, cover_angle=MAX_COVER_ANGLE)
        st = replace(base, ee_pose=pose, engagement=None)
        wrench = self.ft_reading(st)
        return replace(st, wrench=wrench)


def build_scene(cfg: SceneConfig) -> tuple[Scene, WorldState]:
    """Construct the static scene and an initial state at the survey pose."""
    scene = Scene(cfg)
    cam = scene.perception_camera_pose
    ee0 = Pose(cam.rotation, cam.translation, (WORLD, EE))
    state = WorldState(ee_pose=ee0, cover_angle=math.radians(cfg.cover_angle_deg))
    return scene, state
