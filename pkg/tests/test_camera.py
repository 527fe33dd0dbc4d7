import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import project4, rodrigues, transform4

from ggmcert.camera import (
    CameraIntrinsics,
    InvisiblePointError,
    PoseBox,
    analog_project,
    focal_length_px,
    pose_norm,
    project_vertices,
    rotation_matrices,
    rotation_matrix,
    to_camera_frame,
    to_pixel,
    visibility_check,
)
from ggmcert.target import make_target

angles = st.floats(-math.pi, math.pi, allow_nan=False)


def test_rotation_identity():
    assert np.array_equal(rotation_matrix(0, 0, 0), np.eye(3))


def test_pure_yaw_maps_x_to_y():
    np.testing.assert_allclose(rotation_matrix(0, 0, math.pi / 2) @ [1, 0, 0], [0, 1, 0], atol=1e-15)


def test_rotation_closed_form():
    # Rz(yaw) Ry(pitch) Rx(roll), entries written out by hand
    r, p, y = 0.1, 0.2, 0.3
    cr, sr, cp, sp, cy, sy = math.cos(r), math.sin(r), math.cos(p), math.sin(p), math.cos(y), math.sin(y)
    expected = np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )
    np.testing.assert_allclose(rotation_matrix(r, p, y), expected, atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(angles, angles, angles)
def test_rotation_matches_axis_angle_oracle(r, p, y):
    ref = rodrigues((0, 0, 1), y) @ rodrigues((0, 1, 0), p) @ rodrigues((1, 0, 0), r)
    R = rotation_matrix(r, p, y)
    np.testing.assert_allclose(R, ref, atol=1e-12)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert math.isclose(np.linalg.det(R), 1.0, abs_tol=1e-12)


def test_batched_rotations_match_scalar(rng):
    q = rng.uniform(-3, 3, size=(50, 6))
    Rs = rotation_matrices(q)
    for qi, Ri in zip(q, Rs):
        np.testing.assert_allclose(Ri, rotation_matrix(*qi[3:]), atol=1e-15)


def test_camera_frame_translation_only():
    np.testing.assert_allclose(to_camera_frame((0, 0), (0, 0, 2, 0, 0, 0)), [0, 0, 2])


def test_camera_frame_pure_yaw():
    np.testing.assert_allclose(to_camera_frame((1, 0), (0, 0, 0, 0, 0, math.pi / 2)), [0, 1, 0], atol=1e-15)


def test_camera_frame_matches_homogeneous_transform():
    q = (0.1, 0.2, 1.0, 0.05, -0.05, 0.1)
    ref = transform4(q) @ np.array([0.5, -0.5, 0.0, 1.0])
    np.testing.assert_allclose(to_camera_frame((0.5, -0.5), q), ref[:3], atol=1e-14)


@pytest.mark.parametrize("z", [0.5, 1.0, 7.25])
def test_optical_axis_projection(z):
    k = CameraIntrinsics(100.0, 64, 48)
    h = analog_project((0, 0), (0, 0, z, 0, 0, 0), k)
    np.testing.assert_allclose(h, (32 * z, 24 * z, z))


def test_projection_scales_with_translation():
    k = CameraIntrinsics(100.0, 64, 48)
    q = np.array([0.1, -0.2, 1.3, 0, 0, 0])
    a = np.array(analog_project((0, 0), q, k))
    b = np.array(analog_project((0, 0), q * np.array([3, 3, 3, 1, 1, 1]), k))
    np.testing.assert_allclose(b, 3 * a)


def test_projection_hand_evaluated():
    # camera point (0.1, 0.5, 1.5): px = 100*0.1 + 32*1.5, py = 100*0.5 + 24*1.5
    k = CameraIntrinsics(100.0, 64, 48)
    np.testing.assert_allclose(analog_project((0.1, 0.1), (0, 0.4, 1.5, 0, 0, 0), k), (58.0, 86.0, 1.5))


@settings(max_examples=200, deadline=None)
@given(
    st.tuples(st.floats(-1, 1), st.floats(-1, 1)),
    st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.2, 5), angles, angles, angles),
)
def test_projection_matches_4x4_oracle(v, q):
    k = CameraIntrinsics(533.33, 640, 480)
    np.testing.assert_allclose(analog_project(v, q, k), project4(v, q, k.f, k.W, k.H), rtol=1e-12, atol=1e-9)
    batch = project_vertices(np.array([v]), np.array([q]), k)[0, 0]
    np.testing.assert_allclose(batch, analog_project(v, q, k), rtol=1e-13, atol=1e-10)


def test_to_pixel_examples():
    assert to_pixel((640, 480, 2)) == (320, 240)
    assert to_pixel((639.9, 480.0, 2)) == (319, 240)
    assert to_pixel((639.9, 480.0, 2), rounding="nearest") == (320, 240)


@pytest.mark.parametrize("pz", [-1.0, 0.0])
def test_to_pixel_behind_camera(pz):
    with pytest.raises(InvisiblePointError):
        to_pixel((1, 1, pz))


def test_visibility(desk_camera, slow_vehicle):
    assert visibility_check(slow_vehicle, (0, 0, 1, 0, 0, 0), desk_camera)
    assert not visibility_check(slow_vehicle, (0, 0, -1, 0, 0, 0), desk_camera)
    # pushed sideways until one corner leaves the frame
    assert not visibility_check(slow_vehicle, (0.45, 0, 1, 0, 0, 0), desk_camera)


def test_visibility_agrees_with_projection_oracle(desk_camera, slow_vehicle, rng):
    box = PoseBox([-0.4, -0.3, 0.6, -0.3, -0.3, -0.3], [0.4, 0.3, 1.5, 0.3, 0.3, 0.3])
    verts = [v for p in slow_vehicle.polygons for v in p]
    k = desk_camera
    for q in box.sample(rng, 300):
        hs = [project4(v, q, k.f, k.W, k.H) for v in verts]
        ok = all(h[2] > 0 and 1 <= math.floor(h[0] / h[2]) <= k.W and 1 <= math.floor(h[1] / h[2]) <= k.H for h in hs)
        assert visibility_check(slow_vehicle, q, k) == ok


def test_visibility_single_vertex_off_image():
    k = CameraIntrinsics(100.0, 64, 48)
    # the apex of this triangle projects left of pixel column 1
    t = make_target("t", [[(-0.33, 0.0), (0.1, -0.1), (0.1, 0.1)]])
    assert not visibility_check(t, (0, 0, 1, 0, 0, 0), k)
    t2 = make_target("t", [[(-0.3, 0.0), (0.1, -0.1), (0.1, 0.1)]])
    assert visibility_check(t2, (0, 0, 1, 0, 0, 0), k)


def test_focal_length_conversion():
    assert math.isclose(focal_length_px(8.0, 15.0), 533.333333, rel_tol=1e-6)
    k = CameraIntrinsics.from_dict({"focal_mm": 8, "pixel_um": 15, "W": 640, "H": 480})
    assert math.isclose(k.f, 1600 / 3)


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0.0, 64, 48)
    with pytest.raises(ValueError):
        CameraIntrinsics(10.0, 0, 48)


def test_pose_box_basics(rng):
    b = PoseBox([0, 0, 1, 0, 0, 0], [1, 0, 2, 0, 0, 0.5])
    assert list(b.free_dims) == [0, 2, 5]
    s = b.sample(rng, 1000)
    assert all(b.contains(q) for q in s)
    assert PoseBox.from_dict(b.to_dict()) == b
    with pytest.raises(ValueError):
        PoseBox([1] * 6, [0] * 6)
    with pytest.raises(ValueError):
        PoseBox([0] * 6, [float("inf")] * 6)


def test_pose_norm_weighted_linf():
    d = np.array([0.1, -0.5, 0.2, 0, 0, 0])
    assert pose_norm(d) == 0.5
    assert math.isclose(pose_norm(d, [1, 0.1, 1, 1, 1, 1]), 0.2)
