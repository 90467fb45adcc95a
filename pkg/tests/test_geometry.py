import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from triplane_slam.geometry import (
    CameraIntrinsics,
    Pose,
    backproject,
    constant_speed_predict,
    look_at,
    matrix_to_quat,
    pixel_to_ray,
    pose_compose,
    pose_inverse,
    quat_matrix_jacobian,
    quat_normalize,
    quat_to_matrix,
    read_trajectory,
    reproject,
    write_trajectory,
)

finite = st.floats(-3, 3, allow_nan=False)
vec3 = st.tuples(finite, finite, finite)


@st.composite
def poses(draw):
    q = np.array(draw(st.tuples(finite, finite, finite, finite)))
    if np.linalg.norm(q) < 1e-2:
        q = np.array([1.0, 0, 0, 0])
    return Pose(q, np.array(draw(vec3)))


def test_vec7_identity_roundtrip():
    v = Pose.identity().to_vec7()
    assert np.array_equal(v, [1, 0, 0, 0, 0, 0, 0])
    assert Pose.from_vec7(v).allclose(Pose.identity())


def test_vec7_layout():
    assert np.array_equal(Pose([1, 0, 0, 0], [1, 2, 3]).to_vec7(), [1, 0, 0, 0, 1, 2, 3])


def test_vec7_scaled_quaternion_is_same_pose():
    p = Pose.from_axis_angle([0, 1, 1], 0.7, [1, 2, 3])
    v = p.to_vec7()
    v[:4] *= 2
    assert Pose.from_vec7(v).allclose(p)


def test_zero_quaternion_rejected():
    with pytest.raises(ValueError, match="degenerate rotation"):
        quat_normalize([0, 0, 0, 0])


def test_compose_examples():
    T = Pose.from_axis_angle([1, 2, 3], 0.4, [0.5, -1, 2])
    assert pose_compose(Pose.identity(), T).allclose(T)
    assert pose_compose(T, pose_inverse(T)).allclose(Pose.identity())
    a, b = Pose([1, 0, 0, 0], [1, 0, 0]), Pose([1, 0, 0, 0], [0, 1, 0])
    assert np.allclose(pose_compose(a, b).t, [1, 1, 0])


def test_inverse_examples():
    assert pose_inverse(Pose.identity()).allclose(Pose.identity())
    assert np.allclose(pose_inverse(Pose([1, 0, 0, 0], [1, 2, 3])).t, [-1, -2, -3])
    rz = Pose.from_axis_angle([0, 0, 1], math.pi / 2)
    assert pose_inverse(rz).allclose(Pose.from_axis_angle([0, 0, 1], -math.pi / 2))


def test_constant_speed_examples():
    I = Pose.identity()
    assert constant_speed_predict(I, I).allclose(I)
    got = constant_speed_predict(Pose([1, 0, 0, 0], [1, 0, 0]), I)
    assert np.allclose(got.t, [2, 0, 0])
    ten = Pose.from_axis_angle([0, 0, 1], math.radians(10))
    twenty = constant_speed_predict(ten, I)
    assert twenty.allclose(Pose.from_axis_angle([0, 0, 1], math.radians(20)))


@settings(max_examples=50, deadline=None)
@given(poses(), poses())
def test_compose_matches_matrix_product(a, b):
    assert np.allclose((a @ b).matrix(), a.matrix() @ b.matrix(), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(poses())
def test_quaternion_matrix_roundtrip(p):
    R = p.rotation
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(R), 1.0)
    assert np.allclose(quat_to_matrix(matrix_to_quat(R)), R, atol=1e-9)


def test_quat_matrix_jacobian_matches_differences():
    q = quat_normalize([0.3, -0.5, 0.7, 0.2])
    J = quat_matrix_jacobian(q)
    for k in range(4):
        e = np.zeros(4)
        e[k] = 1e-6
        # derivative of the unnormalized-quaternion formula
        fd = (_raw_matrix(q + e) - _raw_matrix(q - e)) / 2e-6
        assert np.allclose(J[k], fd, atol=1e-6)


def _raw_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def test_pixel_to_ray_examples():
    intr = CameraIntrinsics(50, 50, 31.5, 23.5, 64, 48)
    ray = pixel_to_ray(intr, Pose.identity(), 31.5, 23.5)
    assert np.allclose(ray.dir, [0, 0, 1])
    wide = CameraIntrinsics(100, 100, 0, 0, 200, 200)
    d = pixel_to_ray(wide, Pose.identity(), 100, 0).dir
    assert np.allclose(d / d[2], [1, 0, 1])


def test_backproject_reproject_roundtrip():
    intr = CameraIntrinsics(50, 50, 31.5, 23.5, 64, 48)
    pose = look_at([1, 2, 1.5], [0, 0, 0.8])
    u, v = np.array([3.0, 40.2, 63.0]), np.array([0.0, 11.7, 47.0])
    pts = backproject(intr, pose, u, v, np.full(3, 2.0))
    ru, rv, z = reproject(intr, pose, pts)
    assert np.allclose(ru, u, atol=1e-6) and np.allclose(rv, v, atol=1e-6)
    assert np.allclose(z, 2.0)


def test_ray_depth_is_z_depth():
    intr = CameraIntrinsics(50, 50, 31.5, 23.5, 64, 48)
    ray = pixel_to_ray(intr, Pose.identity(), 0, 0, depth=2.0)
    assert np.isclose(ray.point_at_depth(2.0)[2], 2.0)


def test_pixel_out_of_bounds_rejected():
    intr = CameraIntrinsics(50, 50, 31.5, 23.5, 64, 48)
    with pytest.raises(ValueError):
        pixel_to_ray(intr, Pose.identity(), 80, 10)


def test_intrinsics_validation_and_line_roundtrip():
    with pytest.raises(ValueError):
        CameraIntrinsics(0, 50, 1, 1, 10, 10)
    intr = CameraIntrinsics(50, 51, 31.5, 23.5, 64, 48, 5000)
    assert CameraIntrinsics.from_line(intr.to_line()) == intr


def test_look_at_points_camera_z_at_target():
    pose = look_at([2, 0, 1], [0, 0, 1])
    assert np.allclose(pose.rotation[:, 2], [-1, 0, 0])


def test_trajectory_io_roundtrip(tmp_path):
    ps = [Pose.from_axis_angle([0, 0, 1], 0.1 * i, [i, 0.5, -1]) for i in range(4)]
    stamps = [0.0, 0.1, 0.2, 0.3]
    path = tmp_path / "traj.txt"
    write_trajectory(path, stamps, ps)
    text = path.read_text()
    path.write_text("# comment line\n" + text)
    got_stamps, got = read_trajectory(path)
    assert got_stamps == stamps
    assert all(a.allclose(b, 1e-9) for a, b in zip(got, ps))
    first = text.splitlines()[0].split()
    assert len(first) == 8
    # qw is last in the file
    assert np.isclose(float(first[7]), 1.0)
