"""Exact 3D primitives: vectors, unit quaternions, rigid transforms, pinhole projection.

Frame conventions used across the package:
  camera frame:  x right, y down, z forward (optical axis)
  vehicle frame: x forward, y left, z up
A transform named ``T_a_b`` maps points expressed in frame ``b`` into frame
``a``: ``p_a = T_a_b(p_b)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

UNIT_NORM_TOL = 1e-6


@dataclass(frozen=True)
class Vec3:
    """Immutable 3-vector (meters for positions, m/s^2 for accelerations)."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.z)):
            raise InvalidArgumentError(f"Vec3 components must be finite, got {(self.x, self.y, self.z)}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    @staticmethod
    def from_array(a) -> "Vec3":
        return Vec3(float(a[0]), float(a[1]), float(a[2]))

    @staticmethod
    def zero() -> "Vec3":
        return Vec3(0.0, 0.0, 0.0)

    def norm(self) -> float:
        return math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)

    def __add__(self, other: "Vec3") -> "Vec3":
        return Vec3(self.x + other.x, self.y + other.y, self.z + other.z)

    def __sub__(self, other: "Vec3") -> "Vec3":
        return Vec3(self.x - other.x, self.y - other.y, self.z - other.z)

    def __neg__(self) -> "Vec3":
        return Vec3(-self.x, -self.y, -self.z)


@dataclass(frozen=True)
class UnitQuaternion:
    """Unit quaternion in (w, x, y, z) storage order.

    Construction normalises the components but rejects inputs whose norm
    deviates from 1 by more than ``UNIT_NORM_TOL`` -- a badly scaled
    quaternion in a log is corruption, not noise, and silently fixing it
    would hide that.
    """

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        n = math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)
        if not math.isfinite(n) or abs(n - 1.0) > UNIT_NORM_TOL:
            raise InvalidArgumentError(f"quaternion norm {n!r} deviates from 1 beyond {UNIT_NORM_TOL}")
        object.__setattr__(self, "w", self.w / n)
        object.__setattr__(self, "x", self.x / n)
        object.__setattr__(self, "y", self.y / n)
        object.__setattr__(self, "z", self.z / n)

    @staticmethod
    def identity() -> "UnitQuaternion":
        return UnitQuaternion(1.0, 0.0, 0.0, 0.0)

    @staticmethod
    def from_axis_angle(axis, angle_rad: float) -> "UnitQuaternion":
        a = np.asarray(axis, dtype=float)
        n = float(np.linalg.norm(a))
        if n == 0.0:
            raise InvalidArgumentError("rotation axis must be non-zero")
        a = a / n
        half = 0.5 * angle_rad
        s = math.sin(half)
        return UnitQuaternion(math.cos(half), a[0] * s, a[1] * s, a[2] * s)

    @staticmethod
    def from_rotation_matrix(r) -> "UnitQuaternion":
        """Shepperd's method; numerically safe for all rotation matrices."""
        m = np.asarray(r, dtype=float)
        if m.shape != (3, 3):
            raise InvalidArgumentError(f"expected 3x3 rotation matrix, got shape {m.shape}")
        t = m[0, 0] + m[1, 1] + m[2, 2]
        if t > 0.0:
            s = math.sqrt(t + 1.0) * 2.0
            w = 0.25 * s
            x = (m[2, 1] - m[1, 2]) / s
            y = (m[0, 2] - m[2, 0]) / s
            z = (m[1, 0] - m[0, 1]) / s
        elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            w = (m[2, 1] - m[1, 2]) / s
            x = 0.25 * s
            y = (m[0, 1] + m[1, 0]) / s
            z = (m[0, 2] + m[2, 0]) / s
        elif m[1, 1] >= m[2, 2]:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            w = (m[0, 2] - m[2, 0]) / s
            x = (m[0, 1] + m[1, 0]) / s
            y = 0.25 * s
            z = (m[1, 2] + m[2, 1]) / s
        else:
            s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            w = (m[1, 0] - m[0, 1]) / s
            x = (m[0, 2] + m[2, 0]) / s
            y = (m[1, 2] + m[2, 1]) / s
            z = 0.25 * s
        n = math.sqrt(w * w + x * x + y * y + z * z)
        return UnitQuaternion(w / n, x / n, y / n, z / n)

    def components(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=float)

    def conjugate(self) -> "UnitQuaternion":
        return UnitQuaternion(self.w, -self.x, -self.y, -self.z)

    inverse = conjugate

    def __mul__(self, other: "UnitQuaternion") -> "UnitQuaternion":
        w1, x1, y1, z1 = self.w, self.x, self.y, self.z
        w2, x2, y2, z2 = other.w, other.x, other.y, other.z
        return UnitQuaternion(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    def rotation_matrix(self) -> np.ndarray:
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ],
            dtype=float,
        )

    def rotate_array(self, points: np.ndarray) -> np.ndarray:
        """Rotate an (N, 3) array of points."""
        return np.asarray(points, dtype=float) @ self.rotation_matrix().T

    def angle(self) -> float:
        """Rotation angle in [0, pi]."""
        return 2.0 * math.acos(min(1.0, abs(self.w)))

    def slerp(self, other: "UnitQuaternion", alpha: float) -> "UnitQuaternion":
        """Shortest-arc spherical interpolation, alpha in [0, 1]."""
        q0 = self.components()
        q1 = other.components()
        dot = float(np.dot(q0, q1))
        if dot < 0.0:
            q1 = -q1
            dot = -dot
        if dot > 1.0 - 1e-12:
            q = q0 + alpha * (q1 - q0)
        else:
            theta = math.acos(min(1.0, dot))
            s = math.sin(theta)
            q = (math.sin((1.0 - alpha) * theta) / s) * q0 + (math.sin(alpha * theta) / s) * q1
        q = q / np.linalg.norm(q)
        return UnitQuaternion(q[0], q[1], q[2], q[3])


def quat_rotate(q: UnitQuaternion, v: Vec3) -> Vec3:
    """Rotate v by q via the quaternion sandwich product q (0,v) q^-1."""
    # t = 2 (q_vec x v); v' = v + w t + q_vec x t
    qx, qy, qz, qw = q.x, q.y, q.z, q.w
    tx = 2.0 * (qy * v.z - qz * v.y)
    ty = 2.0 * (qz * v.x - qx * v.z)
    tz = 2.0 * (qx * v.y - qy * v.x)
    return Vec3(
        v.x + qw * tx + (qy * tz - qz * ty),
        v.y + qw * ty + (qz * tx - qx * tz),
        v.z + qw * tz + (qx * ty - qy * tx),
    )


@dataclass(frozen=True)
class RigidTransform:
    """Rotation-then-translation map: p_out = R p_in + t."""

    rotation: UnitQuaternion
    translation: Vec3

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(UnitQuaternion.identity(), Vec3.zero())

    @staticmethod
    def from_rt(r: np.ndarray, t) -> "RigidTransform":
        return RigidTransform(UnitQuaternion.from_rotation_matrix(r), Vec3.from_array(np.asarray(t, dtype=float)))

    def apply(self, p: Vec3) -> Vec3:
        return quat_rotate(self.rotation, p) + self.translation

    def apply_array(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.rotation_matrix().T + self.translation.as_array()

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.rotation_matrix()
        m[:3, 3] = self.translation.as_array()
        return m


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform composition: compose(a, b)(p) == a(b(p))."""
    rot = a.rotation * b.rotation
    trans = quat_rotate(a.rotation, b.translation) + a.translation
    return RigidTransform(rot, trans)


def invert(t: RigidTransform) -> RigidTransform:
    q_inv = t.rotation.conjugate()
    return RigidTransform(q_inv, -quat_rotate(q_inv, t.translation))


def transform_distance(a: RigidTransform, b: RigidTransform) -> tuple[float, float]:
    """(translation distance, rotation angle) between two transforms."""
    d_t = (a.translation - b.translation).norm()
    d_r = (a.rotation.conjugate() * b.rotation).angle()
    return d_t, d_r


@dataclass(frozen=True)
class PinholeCamera:
    """Pinhole camera with Brown-Conrady distortion (k1, k2, p1, p2).

    Higher-order radial terms are fixed at zero. Pixel coordinates follow
    the usual convention: pixel centers at integer coordinates, u to the
    right, v downward.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgumentError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise InvalidArgumentError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    def has_distortion(self) -> bool:
        return any(c != 0.0 for c in (self.k1, self.k2, self.p1, self.p2))

    def intrinsic_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class PixelProjection:
    u: float
    v: float
    in_bounds: bool


def distort_normalized(cam: PinholeCamera, xn, yn):
    """Apply Brown-Conrady distortion to normalized image coordinates."""
    x = np.asarray(xn, dtype=float)
    y = np.asarray(yn, dtype=float)
    r2 = x * x + y * y
    radial = 1.0 + cam.k1 * r2 + cam.k2 * r2 * r2
    xd = x * radial + 2.0 * cam.p1 * x * y + cam.p2 * (r2 + 2.0 * x * x)
    yd = y * radial + cam.p1 * (r2 + 2.0 * y * y) + 2.0 * cam.p2 * x * y
    return xd, yd


def undistort_pixel(cam: PinholeCamera, u, v, iterations: int = 8):
    """Invert the distortion model by fixed-point iteration.

    Returns ideal normalized coordinates (x, y) such that projecting them
    with distortion reproduces (u, v).
    """
    xd = (np.asarray(u, dtype=float) - cam.cx) / cam.fx
    yd = (np.asarray(v, dtype=float) - cam.cy) / cam.fy
    x, y = xd.copy(), yd.copy()
    for _ in range(iterations):
        r2 = x * x + y * y
        radial = 1.0 + cam.k1 * r2 + cam.k2 * r2 * r2
        dx = 2.0 * cam.p1 * x * y + cam.p2 * (r2 + 2.0 * x * x)
        dy = cam.p1 * (r2 + 2.0 * y * y) + 2.0 * cam.p2 * x * y
        x = (xd - dx) / radial
        y = (yd - dy) / radial
    return x, y


def project(cam: PinholeCamera, p_cam: Vec3) -> PixelProjection | None:
    """Project a camera-frame point; returns None when the point is behind
    the camera (z <= 0). ``in_bounds`` reports whether the pixel lands
    inside the image area [-0.5, width-0.5) x [-0.5, height-0.5)."""
    if p_cam.z <= 0.0:
        return None
    xn = p_cam.x / p_cam.z
    yn = p_cam.y / p_cam.z
    xd, yd = distort_normalized(cam, xn, yn)
    u = cam.fx * float(xd) + cam.cx
    v = cam.fy * float(yd) + cam.cy
    in_b = (-0.5 <= u < cam.width - 0.5) and (-0.5 <= v < cam.height - 0.5)
    return PixelProjection(u, v, in_b)


def project_points(cam: PinholeCamera, points: np.ndarray):
    """Vectorized projection of an (N, 3) camera-frame array.

    Returns (uv, in_front, in_bounds); uv rows for points behind the
    camera are NaN.
    """
    pts = np.asarray(points, dtype=float)
    z = pts[:, 2]
    in_front = z > 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        xn = np.where(in_front, pts[:, 0] / z, np.nan)
        yn = np.where(in_front, pts[:, 1] / z, np.nan)
    xd, yd = distort_normalized(cam, xn, yn)
    u = cam.fx * xd + cam.cx
    v = cam.fy * yd + cam.cy
    uv = np.column_stack([u, v])
    in_bounds = (
        in_front
        & (u >= -0.5)
        & (u < cam.width - 0.5)
        & (v >= -0.5)
        & (v < cam.height - 0.5)
    )
    return uv, in_front, in_bounds
