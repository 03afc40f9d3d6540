"""Pose/transform algebra: conversions, group laws, relative poses."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from odokit import se3


def random_pose(rng, max_angle=np.pi - 1e-3, t_range=10.0):
    t = rng.uniform(-t_range, t_range, 3)
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return np.concatenate([t, angle * axis])


def quat_rotation_matrix(rotvec):
    """Independent construction: axis-angle -> unit quaternion -> matrix."""
    angle = np.linalg.norm(rotvec)
    if angle < 1e-12:
        return np.eye(3)
    axis = rotvec / angle
    w = np.cos(angle / 2.0)
    x, y, z = axis * np.sin(angle / 2.0)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


class TestPoseToTransform:
    def test_zero_pose_gives_identity(self):
        assert np.array_equal(se3.pose_to_transform(np.zeros(6)), np.eye(4))

    def test_quarter_turn_about_z_maps_x_to_y(self):
        T = se3.pose_to_transform(np.array([0, 0, 0, 0, 0, np.pi / 2]))
        assert np.allclose(T[:3, :3] @ np.array([1.0, 0, 0]), [0, 1, 0], atol=1e-12)

    def test_matches_quaternion_construction(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            p = random_pose(rng)
            T = se3.pose_to_transform(p)
            assert np.allclose(T[:3, :3], quat_rotation_matrix(p[3:]), atol=1e-12)
            assert np.allclose(T[:3, 3], p[:3])

    def test_rejects_non_finite(self):
        with pytest.raises(se3.InvalidPoseError):
            se3.pose_to_transform(np.array([np.nan, 0, 0, 0, 0, 0]))

    def test_rejects_rotation_at_or_beyond_pi(self):
        with pytest.raises(se3.InvalidPoseError):
            se3.pose_to_transform(np.array([0, 0, 0, np.pi + 0.1, 0, 0]))


class TestTransformToPose:
    def test_identity_gives_zero_pose(self):
        assert np.array_equal(se3.transform_to_pose(np.eye(4)), np.zeros(6))

    def test_quarter_turn_matrix_recovers_axis_angle(self):
        T = np.eye(4)
        T[:3, :3] = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
        assert np.allclose(se3.transform_to_pose(T), [0, 0, 0, 0, 0, np.pi / 2], atol=1e-12)

    def test_thousand_random_round_trips(self):
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(1000):
            p = random_pose(rng, max_angle=np.pi - 1e-6)
            q = se3.transform_to_pose(se3.pose_to_transform(p))
            worst = max(worst, np.max(np.abs(p - q)))
        assert worst < 1e-9

    def test_near_pi_rotation_raises(self):
        p = np.array([0, 0, 0, np.pi - 1e-7, 0, 0])
        with pytest.raises(se3.NearSingularRotationError):
            se3.transform_to_pose(se3.pose_to_transform(p))

    def test_rejects_non_orthonormal(self):
        T = np.eye(4)
        T[0, 0] = 1.001
        with pytest.raises(se3.InvalidTransformError):
            se3.transform_to_pose(T)


class TestCompose:
    def test_identity_is_neutral(self):
        T = se3.pose_to_transform(np.array([1, 2, 3, 0.1, 0.2, 0.3]))
        assert np.allclose(se3.compose(T, np.eye(4)), T, atol=1e-12)
        assert np.allclose(se3.compose(np.eye(4), T), T, atol=1e-12)

    def test_inverse_composes_to_identity(self):
        T = se3.pose_to_transform(np.array([-2, 0.5, 1, 0.4, -0.1, 0.9]))
        assert np.allclose(se3.compose(T, se3.invert(T)), np.eye(4), atol=1e-9)

    def test_two_eighth_turns_make_quarter_turn(self):
        T45 = se3.pose_to_transform(np.array([0, 0, 0, 0, 0, np.pi / 4]))
        T90 = se3.pose_to_transform(np.array([0, 0, 0, 0, 0, np.pi / 2]))
        assert np.allclose(se3.compose(T45, T45), T90, atol=1e-12)

    def test_associativity(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            A, B, C = (se3.pose_to_transform(random_pose(rng, max_angle=3.0)) for _ in range(3))
            assert np.allclose(se3.compose(se3.compose(A, B), C),
                               se3.compose(A, se3.compose(B, C)), atol=1e-12)


class TestInvert:
    def test_identity(self):
        assert np.allclose(se3.invert(np.eye(4)), np.eye(4))

    def test_pure_translation(self):
        T = se3.pose_to_transform(np.array([1, 2, 3, 0, 0, 0]))
        assert np.allclose(se3.invert(T)[:3, 3], [-1, -2, -3])

    def test_double_inverse(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            T = se3.pose_to_transform(random_pose(rng))
            assert np.allclose(se3.invert(se3.invert(T)), T, atol=1e-12)


class TestRelativePose:
    def test_self_relative_is_zero(self):
        rng = np.random.default_rng(9)
        p = random_pose(rng, max_angle=2.5)
        assert np.allclose(se3.relative_pose(p, p), np.zeros(6), atol=1e-12)

    def test_relative_to_origin_is_the_pose(self):
        rng = np.random.default_rng(13)
        p = random_pose(rng, max_angle=2.5)
        assert np.allclose(se3.relative_pose(np.zeros(6), p), p, atol=1e-12)

    def test_chained_relatives_reconstruct_trajectory(self):
        rng = np.random.default_rng(17)
        poses = [np.zeros(6)]
        for _ in range(30):
            step = np.concatenate([rng.uniform(-1, 1, 3), rng.uniform(-0.05, 0.05, 3)])
            poses.append(se3.transform_to_pose(
                se3.pose_to_transform(poses[-1]) @ se3.pose_to_transform(step)))
        rel = [se3.relative_pose(poses[i], poses[i + 1]) for i in range(30)]
        T = se3.pose_to_transform(poses[0])
        for r in rel:
            T = T @ se3.pose_to_transform(r)
        assert np.allclose(se3.transform_to_pose(T), poses[-1], atol=1e-8)

    def test_left_composition_recovers_second_pose(self):
        rng = np.random.default_rng(23)
        pa = random_pose(rng, max_angle=1.5)
        pb = random_pose(rng, max_angle=1.5)
        rel = se3.relative_pose(pa, pb)
        recovered = se3.pose_to_transform(pa) @ se3.pose_to_transform(rel)
        assert np.allclose(recovered, se3.pose_to_transform(pb), atol=1e-9)


@given(
    t=st.lists(st.floats(-50, 50), min_size=3, max_size=3),
    axis_raw=st.lists(st.floats(-1, 1), min_size=3, max_size=3),
    angle=st.floats(0, np.pi - 1e-4),
)
@settings(max_examples=80, deadline=None)
def test_round_trip_property(t, axis_raw, angle):
    axis = np.asarray(axis_raw)
    norm = np.linalg.norm(axis)
    if norm < 1e-3:
        axis = np.array([1.0, 0.0, 0.0])
        norm = 1.0
    p = np.concatenate([np.asarray(t), angle * axis / norm])
    q = se3.transform_to_pose(se3.pose_to_transform(p))
    assert np.max(np.abs(p - q)) < 1e-9


def test_batch_kernels_match_scalar_path():
    rng = np.random.default_rng(29)
    poses = np.stack([random_pose(rng) for _ in range(64)])
    T_batch = se3.poses_to_transforms(poses)
    back = se3.transforms_to_poses(T_batch)
    for i in range(64):
        assert np.allclose(T_batch[i], se3.pose_to_transform(poses[i]), atol=0)
        assert np.allclose(back[i], se3.transform_to_pose(T_batch[i]), atol=0)
    inv = se3.invert_many(T_batch)
    for i in range(64):
        assert np.allclose(inv[i], se3.invert(T_batch[i]), atol=0)
