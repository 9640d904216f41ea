import math
from dataclasses import replace

import numpy as np
import pytest

from autocharge.control import (OpenSettings, PerceptionSettings, PiController,
                                PiGains, PiIntegral, ProbeSettings,
                                ServoSettings, StagePlan, attempt_probe,
                                contact_detect, hinge_axis_pose, open_cover,
                                opening_twist, perceive_cover_stage,
                                pi_force_z, sample_servo_start, servo_search)
from autocharge.errors import (AmbiguousCoverError, ClusterConvergenceError,
                               EstimationFailureError)
from autocharge.geometry import EE, Pose, Rotation, WORLD, compose, invert
from autocharge.simworld import Scene, SceneConfig, WorldState, build_scene


def shifted_cover_pose(scene, angle, offset):
    """Ground-truth cover pose with an injected centre error along +x."""
    truth = scene.cover_pose_world(angle)
    delta = truth.rotation.matrix[:, 0] * offset
    return Pose(truth.rotation, truth.translation + delta, truth.frames)


class TestPiForce:
    def test_at_setpoint_zero(self):
        st = PiIntegral()
        assert pi_force_z(10.0, PiGains(), 0.01, st) == 0.0

    def test_formula_direct(self):
        st = PiIntegral()
        gains = PiGains(kp=1e-4, ki=0.0, setpoint=10.0)
        dz = pi_force_z(0.0, gains, 0.01, st)
        assert dz == pytest.approx(1e-5)

    def test_zero_gains_always_zero(self):
        rng = np.random.default_rng(60)
        st = PiIntegral()
        gains = PiGains(kp=0.0, ki=0.0)
        for _ in range(100):
            assert pi_force_z(float(rng.uniform(-50, 50)), gains, 0.01, st) == 0.0

    def test_integral_clamp_bounds_contribution(self):
        gains = PiGains(kp=0.0, ki=2e-5, integral_clamp=10.0)
        st = PiIntegral()
        for _ in range(10000):
            dz = pi_force_z(-40.0, gains, 0.01, st)   # constant large error
            assert abs(dz) <= gains.ki * gains.integral_clamp + 1e-15
        assert abs(st.value) == pytest.approx(10.0)

    def test_step_response_settles(self):
        """Closed-loop press on the plate: 10 N +-1 N within 2 s, no ringing."""
        scene, _ = build_scene(SceneConfig(move_noise=0.0, wrench_noise_force=0.0,
                                           wrench_noise_torque=0.0))
        pi = PiController()
        st = scene.settled_insert_state([0.04, 0.0])
        # restart from 2 mm above the surface
        tip = scene.to_plane(st.ee_pose.translation)
        tip[2] = 0.002
        st = replace(st, ee_pose=Pose(st.ee_pose.rotation, scene.to_world(tip),
                                      st.ee_pose.frames), wrench=np.zeros(6))
        pi.reset()
        fz = []
        for _ in range(30):   # 30 actions x 10 substeps = 3 s
            st, w = scene.planar_move(st, [0.0, 0.0], pi, rng=None)
            fz.append(w[2])
        fz = np.array(fz)
        t = (np.arange(len(fz)) + 1) * 0.1
        settled_from = None
        for i in range(len(fz)):
            if np.all(np.abs(fz[i:] - 10.0) <= 1.0):
                settled_from = t[i]
                break
        assert settled_from is not None and settled_from <= 2.0
        post = fz[int(settled_from / 0.1) - 1:]
        assert np.abs(post - 10.0).max() <= 3.0


class TestContactDetect:
    def test_zero_false(self):
        assert not contact_detect(np.zeros(6))

    def test_boundary_inclusive(self):
        assert contact_detect([0, 0, 3.0, 0, 0, 0])

    def test_norm_rule(self):
        assert contact_detect([1, 2, 2, 0, 0, 0])       # norm exactly 3
        assert not contact_detect([1, 2, 1.9, 0, 0, 0])

    def test_monotone_in_each_component(self):
        rng = np.random.default_rng(61)
        for _ in range(100):
            w = rng.uniform(-3, 3, 6)
            if contact_detect(w):
                bigger = w.copy()
                bigger[:3] *= 1.5
                assert contact_detect(bigger)


class TestAttemptProbe:
    def make(self, angle_deg=45.0):
        scene, state = build_scene(SceneConfig(cover_angle_deg=angle_deg,
                                               move_noise=0.0))
        return scene, state

    def test_zero_error_small_xe(self):
        scene, state = self.make()
        pose = shifted_cover_pose(scene, state.cover_angle, 0.0)
        result, corrected, _ = attempt_probe(scene, state, pose)
        assert abs(result.xe) < 0.001

    @pytest.mark.parametrize("inject", [0.021, -0.021, 0.013, -0.013,
                                        0.034, -0.034, -0.008])
    def test_recovers_injected_error(self, inject):
        scene, state = self.make()
        pose = shifted_cover_pose(scene, state.cover_angle, inject)
        result, corrected, _ = attempt_probe(scene, state, pose)
        assert abs(result.xe + inject) < 0.002
        # corrected centre is back near the truth
        truth = scene.cover_pose_world(state.cover_angle)
        assert np.linalg.norm(corrected.translation - truth.translation) < 0.002

    def test_missing_cover_estimation_failure(self):
        scene, state = self.make()
        truth = scene.cover_pose_world(state.cover_angle)
        far = Pose(truth.rotation, truth.translation + np.array([0.0, 0.2, 0.0]),
                   truth.frames)
        with pytest.raises(EstimationFailureError):
            attempt_probe(scene, state, far)


class TestHingeAxis:
    def test_axis_origin_at_minus_radius(self):
        scene, _ = build_scene(SceneConfig(cover_angle_deg=0.0))
        pose = scene.cover_pose_world(0.0)
        axis = hinge_axis_pose(pose, scene.cfg.cover_radius,
                               scene.plane_pose.rotation)
        assert np.allclose(axis.translation, scene.hinge_origin_w, atol=1e-12)
        assert np.allclose(axis.rotation.matrix[:, 2], scene.hinge_dir_w)

    def test_origin_invariant_under_cover_angle(self):
        scene, _ = build_scene(SceneConfig())
        origins = []
        for deg in (15, 30, 45, 60, 75):
            pose = scene.cover_pose_world(math.radians(deg))
            axis = hinge_axis_pose(pose, scene.cfg.cover_radius,
                                   scene.plane_pose.rotation)
            origins.append(axis.translation)
        for o in origins[1:]:
            assert np.allclose(o, origins[0], atol=1e-12)

    def test_perceived_scene_axis_close_to_truth(self):
        cfg = SceneConfig(cover_angle_deg=45.0)
        scene, state = build_scene(cfg)
        rng = np.random.default_rng(62)
        est, pose_w, state = perceive_cover_stage(scene, state,
                                                  PerceptionSettings(), 0, rng)
        result, corrected, state = attempt_probe(scene, state, pose_w)
        axis = hinge_axis_pose(corrected, cfg.cover_radius,
                               scene.plane_pose.rotation)
        d = axis.translation - scene.hinge_origin_w
        d_perp = d - (d @ scene.hinge_dir_w) * scene.hinge_dir_w
        assert np.linalg.norm(d_perp) < 0.003


class TestOpeningTwist:
    def axis(self, scene):
        pose = scene.cover_pose_world(0.0)
        return hinge_axis_pose(pose, scene.cfg.cover_radius,
                               scene.plane_pose.rotation)

    def test_zero_rate_zero_twist(self):
        scene, _ = build_scene(SceneConfig())
        tw = opening_twist(self.axis(scene), [0.1, 0.2, 0.3], (0.0, 0.0, 0.0))
        assert np.all(tw.linear == 0) and np.all(tw.angular == 0)

    def test_on_axis_zero_linear(self):
        scene, _ = build_scene(SceneConfig())
        axis = self.axis(scene)
        tw = opening_twist(axis, axis.translation)
        assert np.allclose(tw.linear, 0)
        assert np.linalg.norm(tw.angular) == pytest.approx(0.1)

    def test_lever_arm_magnitude(self):
        scene, _ = build_scene(SceneConfig())
        axis = self.axis(scene)
        # 0.04 m lever perpendicular to the hinge direction
        ee = axis.translation + 0.04 * scene.plane_pose.rotation.matrix[:, 0]
        tw = opening_twist(axis, ee)
        assert np.linalg.norm(tw.linear) == pytest.approx(0.004, abs=1e-9)

    def test_equivariant_under_scene_yaw(self):
        base, _ = build_scene(SceneConfig(plane_yaw_deg=0.0))
        rot, _ = build_scene(SceneConfig(plane_yaw_deg=40.0))
        r = rot.plane_pose.rotation
        ee = base.hinge_origin_w + np.array([0.03, 0.01, 0.02])
        tw0 = opening_twist(self.axis(base), ee)
        tw1 = opening_twist(self.axis(rot), r.apply(ee))
        assert np.allclose(tw1.linear, r.apply(tw0.linear), atol=1e-12)
        assert np.allclose(tw1.angular, r.apply(tw0.angular), atol=1e-12)

    def test_direction_opens_the_cover(self):
        scene, state = build_scene(SceneConfig(cover_angle_deg=45.0))
        axis = self.axis(scene)
        pose = scene.cover_pose_world(state.cover_angle)
        tip = pose.apply([0.8 * scene.cfg.cover_radius, 0.0, -scene.cfg.cover_thickness])
        tw = opening_twist(axis, tip)
        # linear velocity must push the contact point toward larger angles:
        # positive component along d(angle) direction
        d = tip - scene.hinge_origin_w
        tangent = np.cross(-scene.hinge_dir_w, d)
        assert tw.linear @ tangent > 0


class TestOpenCover:
    @pytest.mark.parametrize("angle", [30.0, 45.0, 60.0, 75.0])
    def test_opens_with_bounded_force(self, angle):
        scene, state = build_scene(SceneConfig(cover_angle_deg=angle,
                                               move_noise=0.0))
        pose = scene.cover_pose_world(state.cover_angle)
        axis = hinge_axis_pose(pose, scene.cfg.cover_radius,
                               scene.plane_pose.rotation)
        forces = []
        angles = [state.cover_angle]

        class Spy:
            def __init__(self):
                self.records = []

            def add(self, time, phase, **kw):
                forces.append(kw["force"])
                angles.append(math.radians(kw["cover_angle_deg"]))

            def close_stage(self, *a, **k):
                pass

        outcome, state = open_cover(scene, state, pose, axis, log=Spy())
        assert outcome == "success"
        assert state.cover_angle >= math.radians(90.0) - 1e-6
        assert max(forces) <= 3.0
        assert np.all(np.diff(angles) >= -1e-12)   # monotone opening

    def test_hinge_distance_constant(self):
        scene, state = build_scene(SceneConfig(cover_angle_deg=45.0))
        pose = scene.cover_pose_world(state.cover_angle)
        axis = hinge_axis_pose(pose, scene.cfg.cover_radius,
                               scene.plane_pose.rotation)
        dists = []

        class Watcher:
            def add(self, time, phase, **kw):
                pass

            def close_stage(self, *a, **k):
                pass

        # re-run manually to watch the tip radius
        from autocharge.control import OpenSettings, contact_detect, opening_twist
        from autocharge.geometry import Twist
        s = OpenSettings()
        start_b = np.array([0.8 * scene.cfg.cover_radius, 0.0,
                            -scene.cfg.cover_thickness - s.approach_standoff])
        st = scene.set_ee_pose(state, Pose(state.ee_pose.rotation,
                                           pose.apply(start_b), (WORLD, EE)))
        normal_w = pose.rotation.matrix[:, 2]
        while not contact_detect(st.wrench, s.engage_force):
            st = scene.step(st, Twist(s.approach_speed * normal_w,
                                      np.zeros(3), WORLD), s.dt)
        while st.cover_angle < math.radians(90.0):
            tw = opening_twist(axis, st.ee_pose.translation, (0, 0, -s.omega))
            st = scene.step(st, tw, s.dt)
            d = st.ee_pose.translation - scene.hinge_origin_w
            d_perp = d - (d @ scene.hinge_dir_w) * scene.hinge_dir_w
            dists.append(np.linalg.norm(d_perp))
        assert max(dists) - min(dists) < 1e-4

    def test_corrupted_axis_force_abort(self):
        scene, state = build_scene(SceneConfig(cover_angle_deg=45.0))
        pose = scene.cover_pose_world(state.cover_angle)
        axis = hinge_axis_pose(pose, scene.cfg.cover_radius,
                               scene.plane_pose.rotation)
        bad_axis = Pose(axis.rotation,
                        axis.translation + np.array([0.01, 0.0, 0.0]),
                        axis.frames)
        outcome, _ = open_cover(scene, state, pose, bad_axis)
        assert outcome == "force_abort"

    def test_already_open_immediate_success(self):
        scene, state = build_scene(SceneConfig(cover_angle_deg=95.0))
        pose = scene.cover_pose_world(state.cover_angle)
        axis = hinge_axis_pose(pose, scene.cfg.cover_radius,
                               scene.plane_pose.rotation)
        outcome, out_state = open_cover(scene, state, pose, axis)
        assert outcome == "success"
        assert out_state.time == state.time


class TestPerceiveStage:
    def test_45_deg_scene_ok(self):
        scene, state = build_scene(SceneConfig(cover_angle_deg=45.0))
        rng = np.random.default_rng(63)
        est, pose_w, _ = perceive_cover_stage(scene, state, PerceptionSettings(),
                                              7, rng)
        truth = scene.cover_pose_world(state.cover_angle)
        normal_err = math.degrees(math.acos(np.clip(
            pose_w.rotation.matrix[:, 2] @ truth.rotation.matrix[:, 2], -1, 1)))
        assert normal_err < 3.0
        assert np.linalg.norm(pose_w.translation - truth.translation) < 0.01

    def test_15_deg_scene_fails(self):
        scene, state = build_scene(SceneConfig(cover_angle_deg=15.0))
        rng = np.random.default_rng(64)
        with pytest.raises((AmbiguousCoverError, ClusterConvergenceError)):
            perceive_cover_stage(scene, state, PerceptionSettings(), 7, rng)


class TestServoStage:
    def test_converges_and_hands_off_within_2mm(self):
        scene, state = build_scene(SceneConfig(cover_angle_deg=95.0))
        rng = np.random.default_rng(65)
        start = sample_servo_start(scene, rng, max_offset=0.2)
        outcome, state, errors = servo_search(scene, state, start,
                                              ServoSettings(), rng)
        assert outcome == "success"
        assert errors[-1] < 2.0
        target = scene.servo_target_pose
        assert np.linalg.norm(state.ee_pose.translation - target.translation) < 0.002

    def test_stage_plan_defaults(self):
        plan = StagePlan()
        assert plan.stages == ("perceive_cover", "attempt", "open_cover",
                               "servo_search", "insert")
        assert set(plan.timeouts) == set(plan.stages)


class TestServoVisibilityLoss:
    def test_visibility_lost_after_sweep(self, monkeypatch):
        from autocharge.errors import VisibilityError
        scene, state = build_scene(SceneConfig(cover_angle_deg=95.0))
        start = scene.servo_target_pose
        scene.target_features()   # cache the taught pattern first

        def never_visible(*a, **k):
            raise VisibilityError("features occluded")

        monkeypatch.setattr(scene, "render_features", never_visible)
        outcome, _, errors = servo_search(scene, state, start, ServoSettings(),
                                          np.random.default_rng(0))
        assert outcome == "visibility_lost"
        assert errors == []


class TestEndToEndEstimation:
    def test_hundred_randomized_scenes(self):
        """Normal error < 3 deg and post-probe centre error < 2 mm along the
        probe axis, each in at least 95 of 100 randomized scenes."""
        rng = np.random.default_rng(314)
        normal_ok = 0
        center_ok = 0
        n = 100
        for k in range(n):
            angle = float(rng.uniform(30.0, 75.0))
            dropout = float(rng.uniform(0.0, 0.20))
            cfg = SceneConfig(cover_angle_deg=angle, edge_dropout=dropout,
                              edge_dropout_mode="sector" if rng.random() < 0.5
                              else "uniform")
            scene, state = build_scene(cfg)
            seed = int(rng.integers(2 ** 31))
            try:
                est, pose_w, state = perceive_cover_stage(
                    scene, state, PerceptionSettings(), seed,
                    np.random.default_rng(seed))
            except Exception:
                continue
            truth = scene.cover_pose_world(state.cover_angle)
            cosang = np.clip(pose_w.rotation.matrix[:, 2]
                             @ truth.rotation.matrix[:, 2], -1, 1)
            if math.degrees(math.acos(cosang)) < 3.0:
                normal_ok += 1
            try:
                result, corrected, state = attempt_probe(scene, state, pose_w)
            except Exception:
                continue
            residual = abs(float((corrected.translation - truth.translation)
                                 @ corrected.rotation.matrix[:, 0]))
            if residual < 0.002:
                center_ok += 1
        assert normal_ok >= 95
        assert center_ok >= 95
