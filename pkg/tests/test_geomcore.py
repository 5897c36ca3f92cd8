import math

import numpy as np
import pytest

from terrafuse.errors import InvalidArgumentError
from terrafuse.geomcore import (
    PinholeCamera,
    RigidTransform,
    UnitQuaternion,
    Vec3,
    compose,
    invert,
    project,
    project_points,
    quat_rotate,
    transform_distance,
)

SQ2 = math.sqrt(2.0) / 2.0


def test_quat_rotate_identity():
    v = quat_rotate(UnitQuaternion.identity(), Vec3(1.0, 2.0, 3.0))
    assert (v.x, v.y, v.z) == (1.0, 2.0, 3.0)


def test_quat_rotate_180_about_x():
    q = UnitQuaternion(0.0, 1.0, 0.0, 0.0)
    v = quat_rotate(q, Vec3(0.0, 0.0, 9.81))
    np.testing.assert_allclose([v.x, v.y, v.z], [0.0, 0.0, -9.81], atol=1e-12)


def test_quat_rotate_90_about_z():
    q = UnitQuaternion(SQ2, 0.0, 0.0, SQ2)
    v = quat_rotate(q, Vec3(1.0, 0.0, 0.0))
    np.testing.assert_allclose([v.x, v.y, v.z], [0.0, 1.0, 0.0], atol=1e-12)


def test_quat_rotate_matches_matrix_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        axis = rng.normal(size=3)
        q = UnitQuaternion.from_axis_angle(axis, rng.uniform(-math.pi, math.pi))
        v = Vec3.from_array(rng.normal(size=3))
        got = quat_rotate(q, v).as_array()
        want = q.rotation_matrix() @ v.as_array()
        np.testing.assert_allclose(got, want, atol=1e-12)


def test_quat_rotate_preserves_norm():
    rng = np.random.default_rng(1)
    for _ in range(200):
        q = UnitQuaternion.from_axis_angle(rng.normal(size=3), rng.uniform(0, math.pi))
        v = Vec3.from_array(rng.normal(size=3) * 10)
        assert abs(quat_rotate(q, v).norm() - v.norm()) < 1e-12


def test_quat_rotate_inverse_round_trip():
    rng = np.random.default_rng(2)
    for _ in range(100):
        q = UnitQuaternion.from_axis_angle(rng.normal(size=3), rng.uniform(0, math.pi))
        v = Vec3.from_array(rng.normal(size=3))
        back = quat_rotate(q, quat_rotate(q.conjugate(), v))
        np.testing.assert_allclose(back.as_array(), v.as_array(), atol=1e-12)


def test_non_unit_quaternion_rejected():
    with pytest.raises(InvalidArgumentError):
        UnitQuaternion(1.0, 0.1, 0.0, 0.0)


def test_quaternion_normalises_small_deviation():
    q = UnitQuaternion(1.0 + 5e-7, 0.0, 0.0, 0.0)
    assert q.w == 1.0


def test_compose_with_identity():
    t = RigidTransform(UnitQuaternion.from_axis_angle((0, 1, 0), 0.3), Vec3(1.0, -2.0, 0.5))
    c = compose(t, RigidTransform.identity())
    d_t, d_r = transform_distance(c, t)
    assert d_t < 1e-12 and d_r < 1e-12


def test_compose_with_inverse_is_identity():
    t = RigidTransform(UnitQuaternion.from_axis_angle((1, 2, 3), 1.1), Vec3(0.2, 0.4, -0.8))
    ident = compose(t, invert(t))
    assert ident.translation.norm() < 1e-9
    assert ident.rotation.angle() < 1e-9


def test_compose_translations():
    a = RigidTransform(UnitQuaternion.identity(), Vec3(1.0, 0.0, 0.0))
    b = RigidTransform(UnitQuaternion.identity(), Vec3(0.0, 2.0, 0.0))
    c = compose(a, b)
    np.testing.assert_allclose(c.translation.as_array(), [1.0, 2.0, 0.0])


def test_compose_matches_pointwise_application():
    rng = np.random.default_rng(3)
    a = RigidTransform(UnitQuaternion.from_axis_angle(rng.normal(size=3), 0.7), Vec3(0.1, 0.2, 0.3))
    b = RigidTransform(UnitQuaternion.from_axis_angle(rng.normal(size=3), -0.4), Vec3(-1.0, 0.0, 2.0))
    for _ in range(20):
        p = Vec3.from_array(rng.normal(size=3))
        lhs = compose(a, b).apply(p).as_array()
        rhs = a.apply(b.apply(p)).as_array()
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_project_optical_axis():
    cam = PinholeCamera(500.0, 500.0, 320.0, 240.0, 640, 480)
    p = project(cam, Vec3(0.0, 0.0, 2.0))
    assert (p.u, p.v, p.in_bounds) == (320.0, 240.0, True)


def test_project_offset_point():
    cam = PinholeCamera(500.0, 500.0, 320.0, 240.0, 640, 480)
    p = project(cam, Vec3(0.4, 0.0, 2.0))
    np.testing.assert_allclose([p.u, p.v], [420.0, 240.0])


def test_project_behind_camera():
    cam = PinholeCamera(500.0, 500.0, 320.0, 240.0, 640, 480)
    assert project(cam, Vec3(0.0, 0.0, -1.0)) is None


def test_project_out_of_bounds_reported():
    cam = PinholeCamera(500.0, 500.0, 320.0, 240.0, 640, 480)
    p = project(cam, Vec3(2.0, 0.0, 1.0))
    assert not p.in_bounds


def test_project_matches_matrix_oracle():
    # Independent oracle: u = (K [I|0] p) dehomogenised, zero distortion.
    cam = PinholeCamera(480.0, 520.0, 311.0, 255.0, 640, 480)
    k = cam.intrinsic_matrix()
    rng = np.random.default_rng(4)
    pts = np.column_stack([rng.uniform(-2, 2, 1000), rng.uniform(-2, 2, 1000),
                           rng.uniform(0.1, 10, 1000)])
    uv, in_front, _ = project_points(cam, pts)
    hom = pts @ k.T
    want = hom[:, :2] / hom[:, 2:3]
    assert in_front.all()
    np.testing.assert_allclose(uv, want, atol=1e-9)


def test_camera_validation():
    with pytest.raises(InvalidArgumentError):
        PinholeCamera(-1.0, 500.0, 320.0, 240.0, 640, 480)
    with pytest.raises(InvalidArgumentError):
        PinholeCamera(500.0, 500.0, 700.0, 240.0, 640, 480)


def test_vec3_rejects_non_finite():
    with pytest.raises(InvalidArgumentError):
        Vec3(float("nan"), 0.0, 0.0)
