import math

import numpy as np
import pytest

from autocharge.camera import (Intrinsics, PixelFeature, camera_twist_to_ee,
                               interaction_rows, project, servo_twist,
                               stack_interaction)
from autocharge.errors import (BehindCameraError, CameraError,
                               DegenerateFeaturesError)
from autocharge.geometry import CAMERA_CUR, Rotation, Twist


def fd_pixel_jacobian(point, intr, h=1e-6):
    """Finite-difference Jacobian of the projection under scene twists.

    Each column perturbs the observed point with one unit twist of the
    scene relative to the camera: exact rotation, linear translation.
    """
    p = np.asarray(point, dtype=float)
    jac = np.zeros((2, 6))
    for i in range(6):
        xi = np.zeros(6)
        xi[i] = 1.0
        v, w = xi[:3], xi[3:]
        p_plus = Rotation.exp(h * w).apply(p) + h * v
        p_minus = Rotation.exp(-h * w).apply(p) - h * v
        qp = project(p_plus, intr)
        qm = project(p_minus, intr)
        jac[0, i] = (qp.u - qm.u) / (2 * h)
        jac[1, i] = (qp.v - qm.v) / (2 * h)
    return jac


def relative_error(got, want):
    scale = np.maximum(np.abs(want), np.maximum(np.abs(got), 1.0))
    return np.abs(got - want) / scale


class TestProject:
    def test_optical_axis(self):
        intr = Intrinsics(500, 500, 320, 240)
        f = project([0, 0, 1], intr)
        assert (f.u, f.v, f.z) == (320, 240, 1)

    def test_direct_substitution(self):
        intr = Intrinsics(500, 500, 0, 0)
        f = project([0.1, 0.2, 1.0], intr)
        assert np.isclose(f.u, 50.0)
        assert np.isclose(f.v, 100.0)

    def test_matches_scalar_formula_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            intr = Intrinsics(float(rng.uniform(200, 900)), float(rng.uniform(200, 900)),
                              float(rng.uniform(100, 500)), float(rng.uniform(100, 400)))
            p = rng.uniform([-0.3, -0.3, 0.1], [0.3, 0.3, 2.0])
            f = project(p, intr)
            assert np.isclose(f.u, intr.cx + intr.fx * p[0] / p[2])
            assert np.isclose(f.v, intr.cy + intr.fy * p[1] / p[2])
            assert f.z == p[2]

    def test_behind_camera_raises(self):
        with pytest.raises(BehindCameraError):
            project([0, 0, -0.5], Intrinsics())
        with pytest.raises(BehindCameraError):
            project([0, 0, 0], Intrinsics())


class TestInteractionRows:
    def test_principal_point_analytic(self):
        f = 480.0
        intr = Intrinsics(f, f, 320, 240)
        feat = PixelFeature(320.0, 240.0, 1.0)
        rows = interaction_rows(feat, intr)
        assert np.allclose(rows[0], [f, 0, 0, 0, f, 0])
        assert np.allclose(rows[1], [0, f, 0, -f, 0, 0])

    def test_depth_scales_translation_columns_only(self):
        intr = Intrinsics(480, 480, 320, 240)
        near = interaction_rows(PixelFeature(320, 240, 1.0), intr)
        far = interaction_rows(PixelFeature(320, 240, 2.0), intr)
        assert np.allclose(far[:, :3], near[:, :3] / 2.0)
        assert np.allclose(far[:, 3:], near[:, 3:])

    def test_matches_finite_difference_oracle(self):
        rng = np.random.default_rng(12)
        worst = 0.0
        for _ in range(1000):
            intr = Intrinsics(float(rng.uniform(300, 900)), float(rng.uniform(300, 900)),
                              float(rng.uniform(200, 400)), float(rng.uniform(150, 350)))
            p = rng.uniform([-0.2, -0.2, 0.2], [0.2, 0.2, 1.5])
            feat = project(p, intr)
            got = interaction_rows(feat, intr)
            want = fd_pixel_jacobian(p, intr)
            worst = max(worst, relative_error(got, want).max())
        assert worst < 1e-4


class TestServoTwist:
    def make_scene_features(self, rng, k=5, z=0.4):
        pts = rng.uniform([-0.05, -0.05, z], [0.05, 0.05, z + 0.05], size=(k, 3))
        return pts

    def test_zero_error_zero_twist(self):
        intr = Intrinsics()
        feats = [PixelFeature(300.0 + i, 200.0 + 2 * i, 0.4) for i in range(4)]
        t = servo_twist(feats, feats, intr)
        assert np.all(t.linear == 0) and np.all(t.angular == 0)
        assert t.frame == CAMERA_CUR

    def test_linear_in_gain(self):
        intr = Intrinsics()
        rng = np.random.default_rng(13)
        pts = self.make_scene_features(rng)
        cur = [project(p, intr) for p in pts]
        tgt = [project(p + [0.01, 0, 0], intr) for p in pts]
        t1 = servo_twist(cur, tgt, intr, gain=1.0)
        t3 = servo_twist(cur, tgt, intr, gain=3.0)
        assert np.allclose(t3.linear, 3 * t1.linear)
        assert np.allclose(t3.angular, 3 * t1.angular)

    def test_closed_loop_reduces_pixel_error(self):
        """Integrating the returned twist must shrink the error monotonically."""
        intr = Intrinsics()
        rng = np.random.default_rng(14)
        world_pts = np.array([[0.02, 0.0, 0.0], [-0.02, 0.01, 0.0],
                              [0.0, -0.02, 0.0], [0.03, 0.03, 0.0],
                              [-0.03, 0.025, 0.0]])
        cam_rot = Rotation(np.array([[1, 0, 0], [0, -1, 0], [0, 0, -1.0]]))
        cam_target = np.array([0.0, 0.0, 0.4])
        to_cam = lambda rot, pos: (world_pts - pos) @ rot.matrix
        tgt = [project(p, intr) for p in to_cam(cam_rot, cam_target)]
        pos = cam_target + np.array([0.05, -0.04, 0.06])
        rot = cam_rot @ Rotation.about_z(0.4)
        dt = 0.01
        err_prev = None
        for step in range(50):
            cur = [project(p, intr) for p in to_cam(rot, pos)]
            err = np.mean([math.hypot(c.u - t.u, c.v - t.v)
                           for c, t in zip(cur, tgt)])
            if err_prev is not None:
                assert err < err_prev
            err_prev = err
            tw = servo_twist(cur, tgt, intr, gain=1.0)
            pos = pos + dt * rot.apply(tw.linear)
            rot = Rotation.exp(dt * rot.apply(tw.angular)) @ rot

    def test_descent_over_random_starts(self):
        intr = Intrinsics()
        rng = np.random.default_rng(15)
        world_pts = np.array([[0.02, 0.0, 0.0], [-0.02, 0.01, 0.0],
                              [0.0, -0.02, 0.0], [0.03, 0.03, 0.0],
                              [-0.03, 0.025, 0.0]])
        cam_rot = Rotation(np.array([[1, 0, 0], [0, -1, 0], [0, 0, -1.0]]))
        cam_target = np.array([0.0, 0.0, 0.4])
        to_cam = lambda rot, pos: (world_pts - pos) @ rot.matrix
        tgt = [project(p, intr) for p in to_cam(cam_rot, cam_target)]
        checked = 0
        while checked < 100:
            pos = cam_target + rng.uniform(-0.06, 0.06, 3)
            rot = cam_rot @ Rotation.about_z(rng.uniform(-0.5, 0.5))
            cur = [project(p, intr) for p in to_cam(rot, pos)]
            err0 = np.mean([math.hypot(c.u - t.u, c.v - t.v)
                            for c, t in zip(cur, tgt)])
            if err0 > 200 or err0 == 0:
                continue
            checked += 1
            tw = servo_twist(cur, tgt, intr, gain=1.0)
            pos2 = pos + 0.01 * rot.apply(tw.linear)
            rot2 = Rotation.exp(0.01 * rot.apply(tw.angular)) @ rot
            cur2 = [project(p, intr) for p in to_cam(rot2, pos2)]
            err1 = np.mean([math.hypot(c.u - t.u, c.v - t.v)
                            for c, t in zip(cur2, tgt)])
            assert err1 < err0

    def test_collinear_features_degenerate(self):
        intr = Intrinsics()
        cur = [PixelFeature(200.0 + 40 * i, 240.0, 0.4) for i in range(3)]
        tgt = [PixelFeature(210.0 + 40 * i, 250.0, 0.4) for i in range(3)]
        with pytest.raises(DegenerateFeaturesError):
            servo_twist(cur, tgt, intr)

    def test_mismatched_lengths(self):
        intr = Intrinsics()
        f = [PixelFeature(10, 10, 1)] * 3
        with pytest.raises(CameraError):
            servo_twist(f, f[:2], intr)


class TestCameraTwistToEe:
    def test_identity(self):
        t = Twist([1.0, 0, 0], [0, 0.5, 0], CAMERA_CUR)
        out = camera_twist_to_ee(t, Rotation.identity(), Rotation.identity())
        assert np.allclose(out.linear, t.linear)
        assert np.allclose(out.angular, t.angular)
        assert out.frame == "w"

    def test_quarter_turn(self):
        t = Twist([1.0, 0, 0], [0, 0, 0], CAMERA_CUR)
        out = camera_twist_to_ee(t, Rotation.about_z(math.pi / 2), Rotation.identity())
        assert np.allclose(out.linear, [0, 1, 0], atol=1e-12)

    def test_matches_composed_rotation_oracle(self):
        rng = np.random.default_rng(16)
        for _ in range(50):
            r_we = Rotation.exp(rng.normal(size=3))
            r_ec = Rotation.exp(rng.normal(size=3))
            lin, ang = rng.normal(size=3), rng.normal(size=3)
            out = camera_twist_to_ee(Twist(lin, ang, CAMERA_CUR), r_we, r_ec)
            m = r_we.matrix @ r_ec.matrix
            assert np.allclose(out.linear, m @ lin)
            assert np.allclose(out.angular, m @ ang)

    def test_rejects_wrong_frame(self):
        t = Twist([1, 0, 0], [0, 0, 0], "w")
        with pytest.raises(CameraError):
            camera_twist_to_ee(t, Rotation.identity(), Rotation.identity())
