import numpy as np
import pytest

from autocharge.errors import DegenerateGeometryError, FrameMismatchError, GeometryError
from autocharge.geometry import (Pose, Rotation, Twist, compose, cover_x_axis,
                                 invert, rotation_from_axes)


def random_pose(rng, frames=("w", "b")):
    rot = Rotation.exp(rng.normal(size=3))
    return Pose(rot, rng.normal(size=3), frames)


def hom(pose):
    return pose.as_matrix()


class TestCompose:
    def test_identity_left(self):
        rng = np.random.default_rng(1)
        p = random_pose(rng, ("w", "b"))
        ident = Pose.identity("w")
        q = compose(ident, p)
        assert np.allclose(q.as_matrix(), p.as_matrix())

    def test_inverse_right(self):
        rng = np.random.default_rng(2)
        p = random_pose(rng, ("w", "b"))
        q = compose(p, invert(p))
        assert np.abs(q.as_matrix() - np.eye(4)).max() < 1e-12
        assert q.frames == ("w", "w")

    def test_matches_homogeneous_product_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            a = random_pose(rng, ("w", "b"))
            b = random_pose(rng, ("b", "c"))
            got = compose(a, b)
            want = hom(a) @ hom(b)
            assert np.abs(got.as_matrix() - want).max() < 1e-12
            assert got.frames == ("w", "c")

    def test_frame_mismatch_raises(self):
        rng = np.random.default_rng(4)
        a = random_pose(rng, ("w", "b"))
        b = random_pose(rng, ("c", "e"))
        with pytest.raises(FrameMismatchError):
            compose(a, b)


class TestInvert:
    def test_identity(self):
        p = Pose.identity("w")
        assert np.allclose(invert(p).as_matrix(), np.eye(4))

    def test_pure_translation(self):
        p = Pose(Rotation.identity(), [0.1, 0.0, 0.0], ("w", "b"))
        q = invert(p)
        assert np.allclose(q.translation, [-0.1, 0.0, 0.0])
        assert q.frames == ("b", "w")

    def test_matches_matrix_inverse_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            p = random_pose(rng)
            assert np.abs(invert(p).as_matrix() - np.linalg.inv(hom(p))).max() < 1e-10


class TestRotationFromAxes:
    def test_standard_basis_gives_identity(self):
        r = rotation_from_axes([1, 0, 0], [0, 1, 0], [0, 0, 1])
        assert np.allclose(r.matrix, np.eye(3))

    def test_cyclic_permutation(self):
        r = rotation_from_axes([0, 1, 0], [0, 0, 1], [1, 0, 0])
        assert np.allclose(r.matrix, np.array([[0, 0, 1], [1, 0, 0], [0, 1, 0]]))
        assert np.isclose(np.linalg.det(r.matrix), 1.0)

    def test_cover_frame_substitution(self):
        z = np.array([0.0, 0.0, 1.0])
        y = np.array([0.0, 1.0, 0.0])
        x = cover_x_axis(y, z)
        assert np.allclose(x, [1, 0, 0])
        r = rotation_from_axes(x, y, z)
        assert np.allclose(r.matrix, np.eye(3))

    def test_slightly_off_inputs_are_cleaned(self):
        eps = 5e-7
        x = np.array([1.0, eps, 0.0])
        x = x / np.linalg.norm(x)
        r = rotation_from_axes(x, [0, 1, 0], [0, 0, 1])
        assert r.reorthonormalized
        assert np.abs(r.matrix.T @ r.matrix - np.eye(3)).max() < 1e-12

    def test_rejects_non_orthogonal(self):
        with pytest.raises(DegenerateGeometryError):
            rotation_from_axes([1, 0, 0], [1, 0, 0], [0, 0, 1])

    def test_rejects_non_unit(self):
        with pytest.raises(DegenerateGeometryError):
            rotation_from_axes([2, 0, 0], [0, 1, 0], [0, 0, 1])


class TestCoverXAxis:
    def test_basis_cross(self):
        assert np.allclose(cover_x_axis([0, 1, 0], [0, 0, 1]), [1, 0, 0])

    def test_anticommutative(self):
        assert np.allclose(cover_x_axis([0, 0, 1], [0, 1, 0]), [-1, 0, 0])

    def test_matches_determinant_expansion_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            rot = Rotation.exp(rng.normal(size=3)).matrix
            y, z = rot[:, 0], rot[:, 1]
            got = cover_x_axis(y, z)
            want = np.array([y[1] * z[2] - y[2] * z[1],
                             y[2] * z[0] - y[0] * z[2],
                             y[0] * z[1] - y[1] * z[0]])
            want /= np.linalg.norm(want)
            assert np.abs(got - want).max() < 1e-12

    def test_parallel_inputs_raise(self):
        with pytest.raises(DegenerateGeometryError):
            cover_x_axis([0, 0, 1], [0, 0, 1])


class TestInvariants:
    def test_inverse_compose_is_identity(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            p = random_pose(rng)
            q = compose(invert(p), p)
            assert np.abs(q.as_matrix() - np.eye(4)).max() < 1e-12

    def test_rotation_from_axes_always_orthonormal(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            m = Rotation.exp(rng.normal(size=3)).matrix
            r = rotation_from_axes(m[:, 0], m[:, 1], m[:, 2])
            assert np.abs(r.matrix.T @ r.matrix - np.eye(3)).max() < 1e-9
            assert abs(np.linalg.det(r.matrix) - 1.0) < 1e-9

    def test_round_trip_chain_preserves_points(self):
        rng = np.random.default_rng(9)
        frames = ["w", "p", "b", "c", "e"]
        for _ in range(30):
            chain = [random_pose(rng, (frames[i], frames[i + 1]))
                     for i in range(len(frames) - 1)]
            total = Pose.identity("w")
            for p in chain:
                total = compose(total, p)
            for p in reversed(chain):
                total = compose(total, invert(p))
            assert total.frames == ("w", "w")
            pt = rng.normal(size=3)
            assert np.abs(total.apply(pt) - pt).max() < 1e-9

    def test_cover_x_axis_orthogonal_to_inputs(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            m = Rotation.exp(rng.normal(size=3)).matrix
            x = cover_x_axis(m[:, 1], m[:, 2])
            assert abs(x @ m[:, 1]) < 1e-9
            assert abs(x @ m[:, 2]) < 1e-9


class TestValidation:
    def test_rotation_rejects_badly_skewed_matrix(self):
        m = np.eye(3)
        m[0, 1] = 1e-3
        with pytest.raises(GeometryError):
            Rotation(m)

    def test_rotation_rejects_reflection(self):
        m = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(GeometryError):
            Rotation(m)

    def test_twist_requires_finite(self):
        with pytest.raises(GeometryError):
            Twist([np.inf, 0, 0], [0, 0, 0])

    def test_exp_small_angle(self):
        r = Rotation.exp([1e-13, 0, 0])
        assert np.allclose(r.matrix, np.eye(3), atol=1e-12)
