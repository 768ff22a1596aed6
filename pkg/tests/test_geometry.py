import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from irtrack.geometry import (
    Camera, InvalidArgument, ObjectNode, Pose, canonical_axis_angle, invert_transform, object_to_camera,
    project_point, project_points, road_camera, so3_exp, so3_log, so3_right_jacobian, wrap_angle, yaw_of,
)

vec3 = st.lists(st.floats(-3.0, 3.0, allow_nan=False), min_size=3, max_size=3)


def random_rotvecs(rng, n, max_angle=np.pi):
    axes = rng.normal(size=(n, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    return axes * rng.uniform(0, max_angle, (n, 1))


def test_exp_identity_and_quarter_turn():
    assert np.array_equal(so3_exp([0, 0, 0]), np.eye(3))
    R = so3_exp([0, 0, np.pi / 2])
    assert np.allclose(R, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)


def test_log_identity_and_quarter_turn():
    assert np.allclose(so3_log(np.eye(3)), 0.0)
    R = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    assert np.allclose(so3_log(R), [0, 0, np.pi / 2], atol=1e-12)


def test_exp_rejects_non_finite():
    with pytest.raises(InvalidArgument):
        so3_exp([np.nan, 0, 0])


def test_log_rejects_non_rotation():
    with pytest.raises(InvalidArgument):
        so3_log(np.diag([1.0, 1.0, 2.0]))
    with pytest.raises(InvalidArgument):
        so3_log(np.diag([1.0, 1.0, -1.0]))


def test_exp_log_roundtrip_10k():
    rng = np.random.default_rng(0)
    w = random_rotvecs(rng, 10_000, max_angle=np.pi - 1e-6)
    err = max(np.abs(so3_log(so3_exp(v)) - v).max() for v in w)
    assert err < 1e-8


def test_log_exp_roundtrip_1000_rotations():
    rng = np.random.default_rng(1)
    err = 0.0
    for v in random_rotvecs(rng, 1000):
        R = so3_exp(v)
        err = max(err, np.abs(so3_exp(so3_log(R)) - R).max())
    assert err < 1e-8


@pytest.mark.parametrize("theta", [1e-9, 1e-7, 1e-5, 1e-3, np.pi - 1e-3, np.pi - 1e-7, np.pi])
def test_log_stable_near_zero_and_pi(theta):
    axis = np.array([0.3, -0.5, 0.8])
    axis /= np.linalg.norm(axis)
    R = so3_exp(theta * axis)
    w = so3_log(R)
    assert np.linalg.norm(w) <= np.pi + 1e-12
    assert np.abs(so3_exp(w) - R).max() < 1e-8


@given(vec3)
@settings(max_examples=200, deadline=None)
def test_exp_is_rotation(w):
    R = so3_exp(w)
    assert np.abs(R @ R.T - np.eye(3)).max() < 1e-9
    assert abs(np.linalg.det(R) - 1.0) < 1e-9


@given(vec3)
@settings(max_examples=200, deadline=None)
def test_canonical_axis_angle_same_rotation(w):
    c = canonical_axis_angle(w)
    assert np.linalg.norm(c) <= np.pi + 1e-12
    assert np.abs(so3_exp(c) - so3_exp(w)).max() < 1e-9


def test_right_jacobian_first_order():
    rng = np.random.default_rng(2)
    for w in random_rotvecs(rng, 20, 3.0):
        d = rng.normal(size=3) * 1e-6
        lhs = so3_exp(w + d)
        rhs = so3_exp(w) @ so3_exp(so3_right_jacobian(w) @ d)
        assert np.abs(lhs - rhs).max() < 1e-10


def test_yaw_and_wrap():
    assert yaw_of([0, 0, 0.7]) == pytest.approx(0.7)
    assert wrap_angle(np.pi) == pytest.approx(np.pi)
    assert wrap_angle(-np.pi) == pytest.approx(np.pi)
    assert wrap_angle(3 * np.pi / 2) == pytest.approx(-np.pi / 2)


def identity_camera(**kw):
    args = dict(fx=100.0, fy=100.0, cx=64.0, cy=48.0, width=128, height=96)
    args.update(kw)
    return Camera(**args)


def test_object_to_camera_identity():
    T = object_to_camera(ObjectNode(Pose(), 1.0), identity_camera())
    assert np.array_equal(T, np.eye(4))


def test_object_to_camera_matrix_oracle():
    cam = identity_camera()
    T = object_to_camera(ObjectNode(Pose([1.0, 0, 0]), 2.0), cam)
    Tp = np.eye(4)
    Tp[0, 3] = 1.0
    S = np.diag([2.0, 2.0, 2.0, 1.0])
    expected = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            expected[i, j] = sum(Tp[i, k] * S[k, j] for k in range(4))
    assert np.allclose(T, expected, atol=1e-15)


def test_object_to_camera_inverse_consistency():
    rng = np.random.default_rng(3)
    cam = road_camera()
    for _ in range(20):
        node = ObjectNode(Pose(rng.normal(size=3) * 5, rng.normal(size=3)), rng.uniform(0.5, 5))
        T = object_to_camera(node, cam)
        assert np.abs(T @ invert_transform(T) - np.eye(4)).max() < 1e-10


def test_object_to_camera_composition_oracle():
    rng = np.random.default_rng(4)
    cam = road_camera()
    for _ in range(20):
        node = ObjectNode(Pose(rng.normal(size=3) * 5, rng.normal(size=3)), rng.uniform(0.5, 5))
        v = rng.normal(size=3)
        world = so3_exp(node.pose.omega) @ (node.scale * v) + node.pose.t
        expected = so3_exp(cam.pose.omega).T @ (world - cam.pose.t)
        got = object_to_camera(node, cam) @ np.append(v, 1.0)
        assert np.abs(got[:3] - expected).max() < 1e-9
        assert got[3] == 1.0


def test_object_scale_must_be_positive():
    with pytest.raises(InvalidArgument):
        ObjectNode(Pose(), 0.0)


def test_project_point_examples():
    cam = identity_camera()
    uv, z, valid = project_point(cam, [0, 0, 5])
    assert np.allclose(uv, [64, 48]) and z == 5 and valid
    uv, _, _ = project_point(cam, [1, 0, 2])
    assert uv[0] == pytest.approx(114.0)
    _, _, valid = project_point(cam, [0, 0, -1])
    assert not valid


def test_project_matches_homogeneous_oracle():
    rng = np.random.default_rng(5)
    cam = identity_camera()
    X = rng.uniform([-5, -5, 1], [5, 5, 40], (500, 3))
    uv, _, _ = project_points(cam, X)
    h = X @ cam.K.T
    assert np.abs(uv - h[:, :2] / h[:, 2:]).max() < 1e-9


@given(vec3, st.floats(0.1, 50.0))
@settings(max_examples=200, deadline=None)
def test_projection_ray_invariance(x, lam):
    X = np.array(x) + [0, 0, 5.0]
    cam = identity_camera()
    a, _, _ = project_point(cam, X)
    b, _, _ = project_point(cam, lam * X)
    assert np.allclose(a, b, atol=1e-8)


def test_camera_invariants_and_roundtrip():
    with pytest.raises(InvalidArgument):
        identity_camera(fx=0.0)
    with pytest.raises(InvalidArgument):
        identity_camera(cx=200.0)
    cam = road_camera()
    back = Camera.from_dict(cam.to_dict())
    assert np.allclose(back.pose.R, cam.pose.R) and back.width == cam.width


def test_road_camera_looks_forward():
    cam = road_camera(320, 240, 300.0)
    Xc = cam.pose.R.T @ (np.array([20.0, 0.0, 1.5]) - cam.pose.t)
    assert Xc[2] == pytest.approx(20.0) and abs(Xc[0]) < 1e-12
