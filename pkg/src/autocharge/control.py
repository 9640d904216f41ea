"""Deterministic controllers and stage sequencing.

Stages run in a fixed order: perceive_cover, attempt, open_cover,
servo_search, insert.  Each terminates by success, a typed error, or a
timeout, and every run is reconstructible from the EpisodeLog.

Hinge-frame convention: the hinge axis frame carries the panel's
orientation with its axes relabeled so that z lies along the physical
hinge line (z_axis = y_plane, x_axis = z_plane, y_axis = x_plane).  The
nominal opening rate (0, 0, -0.1) rad/s is expressed there, so a
negative z component rotates the cover open.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .camera import camera_twist_to_ee, servo_twist
from .episode import EpisodeLog
from .errors import (AutochargeError, EstimationFailureError, ForceLimitError,
                     StageError, StageTimeoutError, VisibilityError)
from .geometry import (AXIS, CAMERA, EE, Pose, Rotation, Twist, WORLD, compose,
                       invert)
from .perception import (AttemptResult, CoverEstimate, attempt_correction,
                         cover_pose, estimate_normals, crop, remove_isolated,
                         segment_by_normal_kmeans, select_cover_cluster,
                         shifted_estimate)
from .simworld import (MAX_ANGULAR_SPEED, MAX_LINEAR_SPEED, Scene, SceneConfig,
                       WorldState, build_scene)

STAGES = ("perceive_cover", "attempt", "open_cover", "servo_search", "insert")

# axis-frame relabeling of the panel rotation: columns are the axis-frame
# basis vectors expressed in panel coordinates (z_axis along the hinge)
_AXIS_RELABEL = np.array([[0.0, 1.0, 0.0],
                          [0.0, 0.0, 1.0],
                          [1.0, 0.0, 0.0]])


# --------------------------------------------------------------------------
# Force regulation
# --------------------------------------------------------------------------

@dataclass
class PiGains:
    # tuned against the default 5000 N/m contact: settles to the setpoint
    # within ~1.2 s at 100 Hz with no post-settle ringing
    kp: float = 1.4e-3        # m/(s*N)
    ki: float = 3e-5          # integral weight on the clamped N*s accumulator
    integral_clamp: float = 100.0
    setpoint: float = 10.0

    def __post_init__(self):
        if self.kp < 0 or self.ki < 0:
            raise AutochargeError("PI gains must be non-negative")
        if self.integral_clamp <= 0:
            raise AutochargeError("integral clamp must be positive")


@dataclass
class PiIntegral:
    value: float = 0.0


def pi_force_z(fz: float, gains: PiGains, dt: float, state: PiIntegral) -> float:
    """Vertical displacement command regulating the contact force.

    ``dz = kp * e * dt + ki * I`` with ``e = setpoint - fz`` and ``I`` the
    error integral clamped to +-integral_clamp.  Positive dz presses.
    """
    if dt <= 0:
        raise AutochargeError("dt must be positive")
    e = gains.setpoint - fz
    state.value = float(np.clip(state.value + e * dt,
                                -gains.integral_clamp, gains.integral_clamp))
    return gains.kp * e * dt + gains.ki * state.value


class PiController:
    """Stateful wrapper so environments can call a single update method."""

    def __init__(self, gains: PiGains | None = None):
        self.gains = gains or PiGains()
        self.state = PiIntegral()

    def reset(self) -> None:
        self.state = PiIntegral()

    def update(self, fz: float, dt: float) -> float:
        return pi_force_z(fz, self.gains, dt, self.state)


def contact_detect(wrench, threshold: float = 3.0) -> bool:
    """True when the force magnitude reaches the threshold (inclusive)."""
    f = np.asarray(wrench, dtype=float).reshape(-1)[:3]
    return bool(np.linalg.norm(f) >= threshold)


# --------------------------------------------------------------------------
# Stage configurations
# --------------------------------------------------------------------------

@dataclass
class PerceptionSettings:
    knn_k: int = 12
    stride: int = 6
    kmeans_restarts: int = 8
    min_separation: float = 0.21
    ambiguity_ratio: float = 0.8
    isolation_radius: float = 0.012
    isolation_neighbors: int = 3
    injected_center_error: float = 0.0


@dataclass
class ProbeSettings:
    x1: float = 0.05
    force_threshold: float = 3.0
    speed: float = 0.005
    dt: float = 0.01


@dataclass
class OpenSettings:
    omega: float = 0.1
    engage_force: float = 0.25   # first-touch trip; a free cover yields to a press
    stop_force: float = 3.0
    target_angle_deg: float = 90.0
    engage_radius_ratio: float = 0.8
    approach_standoff: float = 0.005
    approach_speed: float = 0.005
    timeout: float = 30.0
    dt: float = 0.01


@dataclass
class ServoSettings:
    gain: float = 1.0
    threshold_px: float = 2.0
    dt: float = 0.01
    timeout: float = 10.0
    max_offset: float = 0.3
    pixel_noise: float | None = None   # None: use the scene default
    damping: float = 1e-6
    jacobian: str = "mean"             # well behaved under large yaw error
    sweep_step_deg: float = 20.0


@dataclass
class StagePlan:
    """Ordered stage names with per-stage simulated-time budgets."""

    stages: tuple = STAGES
    timeouts: dict = field(default_factory=lambda: {
        "perceive_cover": 5.0, "attempt": 60.0, "open_cover": 30.0,
        "servo_search": 10.0, "insert": 60.0})


# --------------------------------------------------------------------------
# Perception stage
# --------------------------------------------------------------------------

def perceive_cover_stage(scene: Scene, state: WorldState,
                         settings: PerceptionSettings, seed: int,
                         rng: np.random.Generator,
                         artifacts: dict | None = None
                         ) -> tuple[CoverEstimate, Pose, WorldState]:
    """Cloud -> segmentation -> cover frame, in the survey camera pose.

    Returns the (possibly error-injected) estimate in camera frame, the
    matching world-frame cover pose, and the updated state.  When an
    ``artifacts`` dict is supplied the intermediate clouds are stored in
    it for export.
    """
    cam = scene.perception_camera_pose
    state = scene.set_ee_pose(state, Pose(cam.rotation, cam.translation, (WORLD, EE)))
    cloud = scene.sample_depth_cloud(state, cam, rng, stride=settings.stride)
    if artifacts is not None:
        artifacts["cloud_raw"] = cloud

    he = scene.cfg.plane_half_extent + 0.05
    corners_p = np.array([[sx * he, sy * he, z]
                          for sx in (-1, 1) for sy in (-1, 1)
                          for z in (-scene.cfg.hole_depth - 0.01, 0.12)])
    corners_c = invert(cam).apply(scene.to_world(corners_p))
    cropped = crop(cloud, corners_c.min(axis=0), corners_c.max(axis=0))
    if artifacts is not None:
        artifacts["cloud_cropped"] = cropped

    with_normals = estimate_normals(cropped, k=settings.knn_k)
    clusters = segment_by_normal_kmeans(
        with_normals, k=2, seed=seed, restarts=settings.kmeans_restarts,
        min_separation=settings.min_separation)
    if artifacts is not None:
        artifacts["cluster_0"] = clusters[0]
        artifacts["cluster_1"] = clusters[1]
    cover_cloud = select_cover_cluster(clusters, max_ratio=settings.ambiguity_ratio)
    cover_cloud = remove_isolated(cover_cloud, settings.isolation_radius,
                                  settings.isolation_neighbors)
    if artifacts is not None:
        artifacts["cloud_cover"] = cover_cloud

    r_cw = invert(cam).rotation
    y_plane_w = scene.plane_pose.rotation.matrix[:, 1]
    est = cover_pose(cover_cloud, r_cw, y_plane_w)
    if settings.injected_center_error:
        est = shifted_estimate(est, settings.injected_center_error)
    pose_w = compose(cam, est.pose)
    return est, pose_w, state


# --------------------------------------------------------------------------
# Attempt stage
# --------------------------------------------------------------------------

def attempt_probe(scene: Scene, state: WorldState, cover_pose_w: Pose,
                  settings: ProbeSettings | None = None, log: EpisodeLog | None = None
                  ) -> tuple[AttemptResult, Pose, WorldState]:
    """Contact probe along the cover's -x axis that corrects the centre.

    The charger starts a distance ``x1`` beyond the estimated rim and
    advances until the force threshold trips; the measured travel gives
    the signed centre correction, which is applied to the pose.
    """
    s = settings or ProbeSettings()
    r_b = scene.cfg.cover_radius
    t_c = scene.cfg.cover_thickness
    x_axis_w = cover_pose_w.rotation.matrix[:, 0]
    # taught contact pose: tip sphere touching the rim, at mid thickness
    start_b = np.array([r_b + scene.cfg.tip_radius + s.x1, 0.0, -t_c / 2.0])
    start_w = cover_pose_w.apply(start_b)
    state = scene.set_ee_pose(state, Pose(state.ee_pose.rotation, start_w, (WORLD, EE)))

    twist = Twist(-s.speed * x_axis_w, np.zeros(3), WORLD)
    traveled = 0.0
    budget = 2.0 * s.x1
    while traveled < budget:
        state = scene.step(state, twist, s.dt)
        traveled += s.speed * s.dt
        if log is not None:
            log.add(state.time, "attempt", travel=traveled,
                    pose=state.ee_pose.translation, wrench=state.wrench,
                    force=float(np.linalg.norm(state.wrench[:3])))
        if contact_detect(state.wrench, s.force_threshold):
            result = attempt_correction(s.x1, traveled)
            corrected = Pose(cover_pose_w.rotation,
                             cover_pose_w.translation + result.xe * x_axis_w,
                             cover_pose_w.frames)
            return result, corrected, state
    raise EstimationFailureError(
        "attempt", f"no contact within {budget * 1000:.0f} mm of travel")


# --------------------------------------------------------------------------
# Opening stage
# --------------------------------------------------------------------------

def hinge_axis_pose(cover_pose_cb: Pose, cover_radius: float,
                    plane_rotation: Rotation) -> Pose:
    """Hinge frame from the corrected cover pose.

    Origin: cover centre moved by the cover radius along its -x axis.
    Orientation: the panel rotation with axes relabeled so z runs along
    the hinge line.
    """
    origin = cover_pose_cb.translation - cover_radius * cover_pose_cb.rotation.matrix[:, 0]
    rot = Rotation(plane_rotation.matrix @ _AXIS_RELABEL)
    return Pose(rot, origin, (cover_pose_cb.frames[0], AXIS))


def opening_twist(axis_pose: Pose, ee_position, omega_axis=(0.0, 0.0, -0.1)) -> Twist:
    """End-effector twist for rotating the charger about the hinge.

    Angular part: the axis-frame rate mapped into the axis pose's base
    frame.  Linear part: that angular velocity crossed with the lever
    arm from the hinge origin to the end effector.
    """
    omega = axis_pose.rotation.apply(np.asarray(omega_axis, dtype=float))
    arm = np.asarray(ee_position, dtype=float) - axis_pose.translation
    return Twist(np.cross(omega, arm), omega, axis_pose.frames[0])


def open_cover(scene: Scene, state: WorldState, cover_pose_w: Pose,
               axis_pose_w: Pose, settings: OpenSettings | None = None,
               log: EpisodeLog | None = None) -> tuple[str, WorldState]:
    """Drag the cover open about the hinge; returns (outcome, state).

    Outcomes: "success" (target angle reached within force bounds),
    "force_abort" (force limit tripped), "timeout".
    """
    s = settings or OpenSettings()
    target = math.radians(s.target_angle_deg)
    if state.cover_angle >= target:
        return "success", state
    r_b = scene.cfg.cover_radius
    t_c = scene.cfg.cover_thickness

    # approach from below the estimated inner face until light contact
    # (standoff measured from the tip-sphere surface)
    rho = s.engage_radius_ratio * r_b
    start_b = np.array([rho, 0.0, -t_c - scene.cfg.tip_radius - s.approach_standoff])
    start_w = cover_pose_w.apply(start_b)
    state = scene.set_ee_pose(state, Pose(state.ee_pose.rotation, start_w, (WORLD, EE)))
    normal_w = cover_pose_w.rotation.matrix[:, 2]
    approach = Twist(s.approach_speed * normal_w, np.zeros(3), WORLD)
    traveled = 0.0
    while traveled < s.approach_standoff + 0.01:
        state = scene.step(state, approach, s.dt)
        traveled += s.approach_speed * s.dt
        if contact_detect(state.wrench, s.engage_force):
            break
    else:
        return "timeout", state

    t_limit = state.time + s.timeout
    while state.time < t_limit:
        twist = opening_twist(axis_pose_w, state.ee_pose.translation,
                              (0.0, 0.0, -s.omega))
        state = scene.step(state, twist, s.dt)
        force = float(np.linalg.norm(state.wrench[:3]))
        if log is not None:
            log.add(state.time, "open_cover", pose=state.ee_pose.translation,
                    wrench=state.wrench,
                    cover_angle_deg=math.degrees(state.cover_angle), force=force)
        if force >= s.stop_force:
            return "force_abort", state
        if state.cover_angle >= target:
            return "success", state
    return "timeout", state


# --------------------------------------------------------------------------
# Visual-servo search stage
# --------------------------------------------------------------------------

def _look_at_pose(scene: Scene, position_w: np.ndarray, yaw: float) -> Pose:
    z_axis = scene.to_world(np.zeros(3)) - position_w
    z_axis = z_axis / np.linalg.norm(z_axis)
    ref = scene.plane_pose.rotation.matrix[:, 0]
    x_axis = ref - (ref @ z_axis) * z_axis
    n = np.linalg.norm(x_axis)
    if n < 1e-9:
        ref = scene.plane_pose.rotation.matrix[:, 1]
        x_axis = ref - (ref @ z_axis) * z_axis
        n = np.linalg.norm(x_axis)
    x_axis /= n
    y_axis = np.cross(z_axis, x_axis)
    rot = Rotation(np.column_stack([x_axis, y_axis, z_axis])) @ Rotation.about_z(yaw)
    return Pose(rot, position_w, (WORLD, CAMERA))


def sample_servo_start(scene: Scene, rng: np.random.Generator,
                       max_offset: float = 0.3, max_tries: int = 100) -> Pose:
    """Random reachable start: offset within a ball, look-at plus free yaw."""
    target = scene.servo_target_pose.translation
    for _ in range(max_tries):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        offset = direction * max_offset * rng.random() ** (1 / 3)
        pos = target + offset
        if float(scene.to_plane(pos)[2]) < 0.05:
            continue
        yaw = rng.uniform(-math.pi, math.pi)
        pose = _look_at_pose(scene, pos, yaw)
        try:
            scene.render_features(pose, pixel_noise=0.0, rng=None)
        except VisibilityError:
            continue
        return pose
    raise VisibilityError("could not sample a start pose with visible features")


def _clamped(twist: Twist) -> Twist:
    v = float(np.linalg.norm(twist.linear))
    w = float(np.linalg.norm(twist.angular))
    scale = min(1.0, (0.9 * MAX_LINEAR_SPEED) / v if v > 0 else 1.0,
                (0.9 * MAX_ANGULAR_SPEED) / w if w > 0 else 1.0)
    return twist.scaled(scale)


def servo_search(scene: Scene, state: WorldState, start_pose: Pose,
                 settings: ServoSettings | None = None,
                 rng: np.random.Generator | None = None,
                 log: EpisodeLog | None = None
                 ) -> tuple[str, WorldState, list[float]]:
    """Drive the wrist camera to the taught feature pattern.

    Returns (outcome, state, per-step mean pixel error).  On feature
    loss the camera sweeps its yaw to reacquire before giving up.
    """
    s = settings or ServoSettings()
    sigma = scene.cfg.pixel_noise if s.pixel_noise is None else s.pixel_noise
    target = scene.target_features()
    state = scene.set_ee_pose(state, Pose(start_pose.rotation, start_pose.translation,
                                          (WORLD, EE)))
    errors: list[float] = []
    t_limit = state.time + s.timeout
    while state.time < t_limit:
        cam_pose = Pose(state.ee_pose.rotation, state.ee_pose.translation,
                        (WORLD, CAMERA))
        try:
            feats = scene.render_features(cam_pose, pixel_noise=sigma, rng=rng)
        except VisibilityError:
            state, found = _yaw_sweep(scene, state, s)
            if not found:
                return "visibility_lost", state, errors
            continue
        err = float(np.mean([math.hypot(c.u - t.u, c.v - t.v)
                             for c, t in zip(feats, target)]))
        errors.append(err)
        if log is not None:
            log.add(state.time, "servo_search", pose=state.ee_pose.translation,
                    pixel_error=err)
        if err < s.threshold_px:
            return "success", state, errors
        twist_cam = servo_twist(feats, target, scene.intrinsics,
                                gain=s.gain, damping=s.damping,
                                jacobian=s.jacobian)
        twist_w = camera_twist_to_ee(twist_cam, state.ee_pose.rotation,
                                     Rotation.identity())
        state = scene.step(state, _clamped(twist_w), s.dt)
    return "timeout", state, errors


def _yaw_sweep(scene: Scene, state: WorldState, s: ServoSettings
               ) -> tuple[WorldState, bool]:
    step = math.radians(s.sweep_step_deg)
    for i in range(1, int(2 * math.pi / step) + 1):
        rot = state.ee_pose.rotation @ Rotation.about_z(step)
        pose = Pose(rot, state.ee_pose.translation, state.ee_pose.frames)
        state = scene.set_ee_pose(state, pose)
        try:
            scene.render_features(Pose(rot, pose.translation, (WORLD, CAMERA)),
                                  pixel_noise=0.0, rng=None)
            return state, True
        except VisibilityError:
            continue
    return state, False


# --------------------------------------------------------------------------
# Full pipeline
# --------------------------------------------------------------------------

def run_pipeline(scene_cfg: SceneConfig, seed: int,
                 perception: PerceptionSettings | None = None,
                 probe: ProbeSettings | None = None,
                 opening: OpenSettings | None = None,
                 servo: ServoSettings | None = None,
                 insert_cfg=None, policy_params=None,
                 log: EpisodeLog | None = None) -> EpisodeLog:
    """Execute all five stages end to end on a fresh scene.

    Any stage error is recorded with its stage identity and re-raised as
    a StageError; the log always reflects how far the run got.
    """
    from .policy import InsertSettings, InsertionEnv, greedy_action  # local: avoids cycle

    log = log if log is not None else EpisodeLog()
    perception = perception or PerceptionSettings()
    probe = probe or ProbeSettings()
    opening = opening or OpenSettings()
    servo = servo or ServoSettings()
    insert_cfg = insert_cfg or InsertSettings()
    seq = np.random.SeedSequence(seed)
    rngs = [np.random.default_rng(s) for s in seq.spawn(5)]
    scene, state = build_scene(scene_cfg)

    # perceive
    try:
        est, pose_w, state = perceive_cover_stage(scene, state, perception,
                                                  seed, rngs[0])
        log.close_stage("perceive_cover", "success", time=state.time,
                        cluster_size=est.cluster_size)
    except AutochargeError as exc:
        log.close_stage("perceive_cover", "failed", error=str(exc))
        log.outcome = "failed:perceive_cover"
        raise StageError("perceive_cover", str(exc)) from exc

    # attempt
    try:
        result, pose_w, state = attempt_probe(scene, state, pose_w, probe, log)
        log.close_stage("attempt", "success", time=state.time, x1=result.x1,
                        x2=result.x2, xe=result.xe)
    except AutochargeError as exc:
        log.close_stage("attempt", "failed", error=str(exc))
        log.outcome = "failed:attempt"
        raise StageError("attempt", str(exc)) from exc

    # open
    cam = scene.perception_camera_pose
    est_cb = compose(invert(cam), pose_w)
    r_cp = invert(cam).rotation @ scene.plane_pose.rotation
    axis_c = hinge_axis_pose(est_cb, scene_cfg.cover_radius, r_cp)
    axis_w = compose(cam, axis_c)
    outcome, state = open_cover(scene, state, pose_w, axis_w, opening, log)
    log.close_stage("open_cover", outcome, time=state.time,
                    cover_angle_deg=math.degrees(state.cover_angle))
    if outcome != "success":
        log.outcome = "failed:open_cover"
        if outcome == "force_abort":
            raise ForceLimitError("open_cover", "force limit exceeded while opening")
        raise StageTimeoutError("open_cover", "cover did not reach the target angle")

    # servo search
    start = sample_servo_start(scene, rngs[3], servo.max_offset)
    outcome, state, errors = servo_search(scene, state, start, servo, rngs[3], log)
    log.close_stage("servo_search", outcome, time=state.time,
                    final_pixel_error=errors[-1] if errors else None,
                    steps=len(errors))
    if outcome != "success":
        log.outcome = "failed:servo_search"
        if outcome == "visibility_lost":
            raise VisibilityError("servo lost the port features")
        raise StageTimeoutError("servo_search", "servo did not converge in time")
    handoff = scene.to_plane(state.ee_pose.translation)[:2]

    # insert
    if policy_params is None:
        log.close_stage("insert", "failed", error="no policy provided")
        log.outcome = "failed:insert"
        raise StageError("insert", "no trained policy provided")
    env = InsertionEnv(scene, insert_cfg, rngs[4])
    obs = env.reset(offset=handoff)
    act = policy_params if callable(policy_params) else (
        lambda o: greedy_action(policy_params, o))
    done = False
    info = {}
    while not done:
        action = act(obs)
        obs, _, done, info = env.step(action)
        log.add(env.state.time, "insert", action=int(action),
                pose=env.state.ee_pose.translation, wrench=env.state.wrench)
    status = "success" if info.get("success") else "failed"
    log.close_stage("insert", status, time=env.state.time,
                    steps=info.get("steps"))
    log.outcome = "success" if status == "success" else "failed:insert"
    return log
