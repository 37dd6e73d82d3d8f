import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egorender.geometry import (FisheyeCamera, GeometryError, OutOfFOVError, PinholeCamera, RigidTransform,
                                axis_angle_to_matrix, camera_from_dict, fisheye_project, fisheye_project_many,
                                fisheye_unproject, load_camera, look_at, pinhole_project, project_world,
                                save_camera)

CAM = FisheyeCamera(100.0, (160.0, 160.0), (320, 320))
PIN = PinholeCamera((200.0, 200.0), (128.0, 128.0), (256, 256))


def test_fisheye_examples():
    np.testing.assert_allclose(fisheye_project([0, 0, 1], CAM), [160, 160], atol=1e-12)
    np.testing.assert_allclose(fisheye_project([1, 0, 0], CAM), [160 + 100 * math.pi / 2, 160], atol=1e-9)
    assert fisheye_project([0, 0, -1], CAM) is None


def test_fisheye_origin_is_domain_error():
    with pytest.raises(GeometryError):
        fisheye_project([0, 0, 0], CAM)


def test_unproject_examples():
    np.testing.assert_allclose(fisheye_unproject([160, 160], CAM), [0, 0, 1], atol=1e-15)
    d = fisheye_unproject([160 + 100 * math.pi / 2, 160], CAM)
    assert abs(d[2]) < 1e-12 and d[0] > 0.999999
    with pytest.raises(OutOfFOVError):
        fisheye_unproject([160 + 100 * math.pi / 2 + 1.0, 160], CAM)


def test_fisheye_radius_bound_and_monotonic(rng):
    theta = np.sort(rng.uniform(0, math.pi / 2, 500))
    pts = np.stack([np.sin(theta), np.zeros_like(theta), np.cos(theta)], axis=1)
    pix, _, valid = fisheye_project_many(pts, CAM)
    r = np.linalg.norm(pix - [160, 160], axis=1)
    assert valid.all()
    assert np.all(r <= CAM.fov_radius + 1e-9)
    assert np.all(np.diff(r) > 0)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, math.pi / 2), st.floats(-math.pi, math.pi))
def test_direction_round_trip(theta, phi):
    d = np.array([math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta)])
    back = fisheye_unproject(fisheye_project(d, CAM), CAM)
    assert back @ d > 1 - 1e-12


def test_fisheye_reduced_fov():
    cam = FisheyeCamera(100.0, (160.0, 160.0), (320, 320), fov_max=math.pi / 4)
    assert fisheye_project([1, 0, 0.5], cam) is None
    assert fisheye_project([0.5, 0, 1], cam) is not None
    with pytest.raises(GeometryError):
        FisheyeCamera(100.0, (0, 0), (10, 10), fov_max=2.0)
    with pytest.raises(GeometryError):
        FisheyeCamera(-1.0, (0, 0), (10, 10))


def test_pinhole_examples():
    pix, z = pinhole_project([0, 0, 2], PIN)
    np.testing.assert_allclose(pix, [128, 128])
    assert z == 2.0
    pix, z = pinhole_project([1, 0, 2], PIN)
    np.testing.assert_allclose(pix, [228, 128])
    assert pinhole_project([0, 0, -1], PIN) is None
    assert pinhole_project([0, 0, 1e-7], PIN) is None


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_rigid_inverse_and_associativity(aa, t, aa2):
    T = RigidTransform(axis_angle_to_matrix(aa), np.array(t))
    U = RigidTransform(axis_angle_to_matrix(aa2), np.array(t[::-1]))
    pts = np.random.default_rng(0).normal(size=(1000, 3))
    assert np.abs((T @ T.inverse()).apply(pts) - pts).max() < 1e-9
    assert np.abs(((T @ U) @ T).apply(pts) - (T @ (U @ T)).apply(pts)).max() < 1e-9
    assert T.is_valid()


def test_rigid_rejects_non_rotation():
    with pytest.raises(GeometryError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_look_at_points_forward():
    T = look_at([0, 0, -3], [0, 0, 0])
    pc = T.apply(np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
    np.testing.assert_allclose(pc[0], [0, 0, 3], atol=1e-12)
    assert pc[1, 1] < 0  # world up is image up (camera y points down)


def test_camera_json_round_trip(tmp_path):
    T = RigidTransform(axis_angle_to_matrix([0.1, 0.2, 0.3]), np.array([1.0, 2.0, 3.0]))
    for cam in (FisheyeCamera(90.0, (10.0, 11.0), (20, 22), T, 1.2), PinholeCamera((5.0, 6.0), (1.0, 2.0), (3, 4), T)):
        save_camera(cam, tmp_path / "c.json")
        back = load_camera(tmp_path / "c.json")
        assert back.to_dict() == cam.to_dict()
        assert camera_from_dict(cam.to_dict()).to_dict() == cam.to_dict()


def test_project_world_uses_pose():
    cam = PinholeCamera((100.0, 100.0), (50.0, 50.0), (100, 100), look_at([0, 0, -2], [0, 0, 0]))
    pix, z, valid = project_world(np.array([[0.0, 0.0, 0.0]]), cam)
    np.testing.assert_allclose(pix[0], [50, 50], atol=1e-9)
    assert valid[0] and abs(z[0] - 2) < 1e-12
