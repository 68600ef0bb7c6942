import numpy as np
import pytest
from hypothesis import given, strategies as st

from facefit.camera import CameraParams, load_camera, project, project_jacobian, save_camera, unproject
from facefit.errors import NearZeroDepth
from facefit.so3 import exp_so3

from conftest import central_diff, rel_err


def axis_cam(fl=500.0, pp=(256.0, 256.0)):
    return CameraParams(np.zeros(3), np.zeros(3), fl, np.array(pp))


def random_cam(rng):
    return CameraParams(rng.normal(size=3) * 0.4, [rng.normal() * 0.05, rng.normal() * 0.05, 1.0 + rng.random()],
                        300 + 400 * rng.random(), rng.uniform(100, 400, 2))


def test_optical_axis():
    pix, depth = project(np.array([[0.0, 0.0, 1.0]]), axis_cam())
    assert np.array_equal(pix, [[256.0, 256.0]]) and np.array_equal(depth, [1.0])


def test_offset_point():
    pix, _ = project(np.array([[0.1, 0.0, 1.0]]), axis_cam())
    np.testing.assert_allclose(pix, [[306.0, 256.0]], atol=1e-12)


def test_points_behind_camera_are_flagged_not_raised():
    pix, depth = project(np.array([[0.0, 0.0, -1.0]]), axis_cam())
    assert depth[0] < 0


@given(st.integers(0, 2**31 - 1))
def test_composed_rigid_transform_leaves_pixels_unchanged(seed):
    rng = np.random.default_rng(seed)
    cam = random_cam(rng)
    X = rng.normal(size=(20, 3)) * 0.1
    # move the world by (Q, s); compensate in the camera extrinsics
    Q = exp_so3(rng.normal(size=3))
    s = rng.normal(size=3)
    R = exp_so3(cam.rotation)
    R2 = R @ Q.T
    w2 = _log(R2)
    cam2 = CameraParams(w2, cam.translation - R2 @ s, cam.focal_length, cam.principal_point)
    p1, _ = project(X, cam)
    p2, _ = project(X @ Q.T + s, cam2)
    np.testing.assert_allclose(p1, p2, atol=1e-9)


def _log(R):
    th = np.arccos(np.clip((np.trace(R) - 1) / 2, -1, 1))
    if th < 1e-12:
        return np.zeros(3)
    if np.pi - th < 1e-6:
        # near pi: axis from the symmetric part
        axis = np.sqrt(np.maximum((np.diag(R) + 1) / 2, 0))
        i = int(np.argmax(axis))
        axis[np.arange(3) != i] = (R[i, np.arange(3) != i] + R[np.arange(3) != i, i]) / (4 * axis[i])
        return th * axis / np.linalg.norm(axis)
    return th / (2 * np.sin(th)) * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])


def test_principal_point_and_focal_derivatives():
    rng = np.random.default_rng(0)
    cam = random_cam(rng)
    X = rng.normal(size=(10, 3)) * 0.1
    J = project_jacobian(X, cam)
    assert np.array_equal(J.d_principal, np.broadcast_to(np.eye(2), (10, 2, 2)))
    xc = cam.to_camera(X)
    np.testing.assert_allclose(J.d_focal, xc[:, :2] / xc[:, 2:3], rtol=0, atol=0)


@pytest.mark.parametrize("seed", range(100))
def test_full_jacobian_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    cam = random_cam(rng)
    if seed % 10 == 0:
        cam.rotation = rng.normal(size=3) * 1e-6
    X = rng.normal(size=(8, 3)) * 0.1
    J = project_jacobian(X, cam)
    h = 1e-6

    def by_cam(x):
        c = CameraParams(x[:3], x[3:6], x[6], x[7:9])
        return project(X, c)[0]
    x0 = np.concatenate([cam.rotation, cam.translation, [cam.focal_length], cam.principal_point])
    num = central_diff(by_cam, x0, h).reshape(8, 2, 9)
    ana = np.concatenate([J.d_rotation, J.d_translation, J.d_focal[:, :, None], J.d_principal], axis=2)
    assert rel_err(ana, num) < 1e-4
    num_pts = central_diff(lambda x: project(x.reshape(-1, 3), cam)[0], X.ravel(), h)
    ana_pts = np.zeros((16, 24))
    for i in range(8):
        ana_pts[2 * i:2 * i + 2, 3 * i:3 * i + 3] = J.d_points[i]
    assert rel_err(ana_pts, num_pts) < 1e-4


def test_near_zero_depth_raises():
    with pytest.raises(NearZeroDepth):
        project_jacobian(np.array([[0.0, 0.0, 1e-9]]), axis_cam())


@given(st.integers(0, 2**31 - 1))
def test_project_then_unproject(seed):
    rng = np.random.default_rng(seed)
    cam = random_cam(rng)
    X = rng.normal(size=(10, 3)) * 0.1
    pix, depth = project(X, cam)
    np.testing.assert_allclose(unproject(pix, depth, cam), cam.to_camera(X), atol=1e-9)


def test_camera_json_round_trip(tmp_path):
    cam = random_cam(np.random.default_rng(3))
    save_camera(tmp_path / "c.json", cam)
    back = load_camera(tmp_path / "c.json")
    for name in ("rotation", "translation", "principal_point"):
        assert np.array_equal(getattr(back, name), getattr(cam, name))
    assert back.focal_length == cam.focal_length


def test_invalid_camera_rejected():
    with pytest.raises(Exception):
        CameraParams(np.zeros(3), np.zeros(3), -1.0, np.zeros(2)).validate()
