"""Extrinsic calibration: pose estimation from point-pixel correspondences,
extrinsic chaining across a shared pattern, scan-line fitting, and the
calibration file schema (``terrafuse-calib/1``).

Corner detection and intrinsic calibration are out of scope: pattern
correspondences and camera intrinsics arrive as data.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DatasetFormatError,
    InsufficientDataError,
    InvalidArgumentError,
    NoConvergenceError,
)
from .geomcore import (
    PinholeCamera,
    RigidTransform,
    UnitQuaternion,
    Vec3,
    compose,
    distort_normalized,
    invert,
    undistort_pixel,
)

CALIB_FORMAT = "terrafuse-calib/1"


@dataclass(frozen=True)
class ScanLine:
    """Placement of the VIS-NIR scan line in the left rectified image:
    the line v = a*u + b, plus the band grid of the sensor."""

    a: float
    b: float
    band_centers: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        centers = np.asarray(self.band_centers, dtype=float)
        if centers.size and np.any(np.diff(centers) <= 0):
            raise InvalidArgumentError("band_centers must be strictly increasing")
        object.__setattr__(self, "band_centers", centers)

    @property
    def band_count(self) -> int:
        return int(self.band_centers.size)

    def v_at(self, u):
        return self.a * np.asarray(u, dtype=float) + self.b


@dataclass(frozen=True)
class ScanLineFit:
    a: float
    b: float
    rms_residual: float


@dataclass(frozen=True)
class CalibrationSet:
    """Full rig calibration.

    Extrinsics follow the package-wide naming: ``t_right_left`` maps
    left-camera coordinates into the right camera, ``t_vehicle_left`` maps
    left-camera coordinates into the vehicle frame, ``t_left_thermal``
    maps thermal-camera coordinates into the left camera.
    """

    left_cam: PinholeCamera
    right_cam: PinholeCamera
    thermal_cam: PinholeCamera
    t_right_left: RigidTransform
    t_vehicle_left: RigidTransform
    t_left_thermal: RigidTransform
    scanline: ScanLine
    baseline: float

    def __post_init__(self):
        if self.baseline <= 0:
            raise InvalidArgumentError(f"baseline must be positive, got {self.baseline}")
        t_norm = self.t_right_left.translation.norm()
        if abs(t_norm - self.baseline) > 1e-9:
            raise InvalidArgumentError(
                f"baseline {self.baseline} does not match |t_right_left| = {t_norm}"
            )
        w = self.left_cam.width
        h = self.left_cam.height
        v0 = self.scanline.v_at(0.0)
        v1 = self.scanline.v_at(float(w - 1))
        if max(v0, v1) < 0 or min(v0, v1) > h - 1:
            raise InvalidArgumentError("scan line does not intersect the left image bounds")


@dataclass(frozen=True)
class PoseEstimate:
    transform: RigidTransform
    rms_error: float
    iterations: int


def _camera_to_dict(cam: PinholeCamera) -> dict:
    return {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
        "k1": cam.k1, "k2": cam.k2, "p1": cam.p1, "p2": cam.p2,
    }


def _camera_from_dict(d: dict) -> PinholeCamera:
    return PinholeCamera(
        fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
        width=int(d["width"]), height=int(d["height"]),
        k1=float(d.get("k1", 0.0)), k2=float(d.get("k2", 0.0)),
        p1=float(d.get("p1", 0.0)), p2=float(d.get("p2", 0.0)),
    )


def _transform_to_dict(t: RigidTransform) -> dict:
    q = t.rotation
    tr = t.translation
    return {"quaternion": [q.w, q.x, q.y, q.z], "translation": [tr.x, tr.y, tr.z]}


def _transform_from_dict(d: dict) -> RigidTransform:
    qw, qx, qy, qz = (float(v) for v in d["quaternion"])
    tx, ty, tz = (float(v) for v in d["translation"])
    return RigidTransform(UnitQuaternion(qw, qx, qy, qz), Vec3(tx, ty, tz))


def save_calibration(calib: CalibrationSet, path) -> None:
    """Write the calibration file. Units: meters, pixels, nanometers."""
    doc = {
        "format": CALIB_FORMAT,
        "left_cam": _camera_to_dict(calib.left_cam),
        "right_cam": _camera_to_dict(calib.right_cam),
        "thermal_cam": _camera_to_dict(calib.thermal_cam),
        "t_right_left": _transform_to_dict(calib.t_right_left),
        "t_vehicle_left": _transform_to_dict(calib.t_vehicle_left),
        "t_left_thermal": _transform_to_dict(calib.t_left_thermal),
        "scanline": {
            "slope": calib.scanline.a,
            "intercept": calib.scanline.b,
            "band_centers": list(map(float, calib.scanline.band_centers)),
        },
        "baseline": calib.baseline,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_calibration(path) -> CalibrationSet:
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"cannot read calibration file {p}: {exc}") from exc
    if doc.get("format") != CALIB_FORMAT:
        raise DatasetFormatError(f"unsupported calibration format {doc.get('format')!r} in {p}")
    try:
        return CalibrationSet(
            left_cam=_camera_from_dict(doc["left_cam"]),
            right_cam=_camera_from_dict(doc["right_cam"]),
            thermal_cam=_camera_from_dict(doc["thermal_cam"]),
            t_right_left=_transform_from_dict(doc["t_right_left"]),
            t_vehicle_left=_transform_from_dict(doc["t_vehicle_left"]),
            t_left_thermal=_transform_from_dict(doc["t_left_thermal"]),
            scanline=ScanLine(
                a=float(doc["scanline"]["slope"]),
                b=float(doc["scanline"]["intercept"]),
                band_centers=np.array(doc["scanline"]["band_centers"], dtype=float),
            ),
            baseline=float(doc["baseline"]),
        )
    except (KeyError, TypeError) as exc:
        raise DatasetFormatError(f"calibration file {p} is missing field: {exc}") from exc


# ---------------------------------------------------------------------------
# Pose from correspondences


def _normalize_2d(pts: np.ndarray):
    """Hartley normalisation: zero centroid, mean distance sqrt(2)."""
    centroid = pts.mean(axis=0)
    d = np.linalg.norm(pts - centroid, axis=1).mean()
    s = math.sqrt(2.0) / max(d, 1e-12)
    t = np.array([[s, 0, -s * centroid[0]], [0, s, -s * centroid[1]], [0, 0, 1.0]])
    return (pts - centroid) * s, t


def _closest_rotation(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


def _init_planar(obj: np.ndarray, xn: np.ndarray, yn: np.ndarray) -> RigidTransform:
    """Homography-based initialisation for (near-)planar patterns."""

    centroid = obj.mean(axis=0)
    _, _, vt = np.linalg.svd(obj - centroid)
    basis = vt[:2].T                       # 3x2 in-plane axes
    normal = np.cross(basis[:, 0], basis[:, 1])
    frame = np.column_stack([basis, normal])  # pattern->plane coords, right handed
    plane_xy = (obj - centroid) @ basis

    src, t_src = _normalize_2d(plane_xy)
    dst, t_dst = _normalize_2d(np.column_stack([xn, yn]))
    n = obj.shape[0]
    a = np.zeros((2 * n, 9))
    for i in range(n):
        px, py = src[i]
        ux, uy = dst[i]
        a[2 * i] = [-px, -py, -1, 0, 0, 0, ux * px, ux * py, ux]
        a[2 * i + 1] = [0, 0, 0, -px, -py, -1, uy * px, uy * py, uy]
    _, _, vt_h = np.linalg.svd(a)
    h = vt_h[-1].reshape(3, 3)
    h = np.linalg.inv(t_dst) @ h @ t_src

    scale = 1.0 / max(np.linalg.norm(h[:, 0]), 1e-300)
    r1 = h[:, 0] * scale
    r2 = h[:, 1] * scale
    r3 = np.cross(r1, r2)
    r_plane = _closest_rotation(np.column_stack([r1, r2, r3]))
    t = h[:, 2] * scale
    # Cheirality: the pattern must sit in front of the camera.
    depth = (obj - centroid) @ basis @ r_plane[2, :2] + t[2]
    if np.median(depth) < 0:
        r_plane = _closest_rotation(np.column_stack([-r1, -r2, np.cross(-r1, -r2)]))
        t = -t
    r_full = r_plane @ frame.T
    t_full = t - r_full @ centroid
    return RigidTransform.from_rt(r_full, t_full)


def _init_dlt(obj: np.ndarray, xn: np.ndarray, yn: np.ndarray) -> RigidTransform:
    """Direct linear transform for a non-planar pattern (normalized coords)."""
    n = obj.shape[0]
    a = np.zeros((2 * n, 12))
    for i in range(n):
        x, y, z = obj[i]
        a[2 * i] = [x, y, z, 1, 0, 0, 0, 0, -xn[i] * x, -xn[i] * y, -xn[i] * z, -xn[i]]
        a[2 * i + 1] = [0, 0, 0, 0, x, y, z, 1, -yn[i] * x, -yn[i] * y, -yn[i] * z, -yn[i]]
    _, _, vt = np.linalg.svd(a)
    p = vt[-1].reshape(3, 4)
    scale = np.linalg.norm(p[:3, :3], axis=1).mean()
    p = p / max(scale, 1e-300)
    if np.median(obj @ p[2, :3] + p[2, 3]) < 0:
        p = -p
    r = _closest_rotation(p[:, :3])
    return RigidTransform.from_rt(r, p[:, 3])


def _so3_exp(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    k = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
    if theta < 1e-12:
        return np.eye(3) + k
    return np.eye(3) + (math.sin(theta) / theta) * k + ((1 - math.cos(theta)) / theta**2) * (k @ k)


def _reproj_residuals(cam: PinholeCamera, r: np.ndarray, t: np.ndarray,
                      obj: np.ndarray, px: np.ndarray) -> np.ndarray:
    p = obj @ r.T + t
    z = np.maximum(p[:, 2], 1e-12)
    xd, yd = distort_normalized(cam, p[:, 0] / z, p[:, 1] / z)
    u = cam.fx * xd + cam.cx
    v = cam.fy * yd + cam.cy
    return np.concatenate([u - px[:, 0], v - px[:, 1]])


def estimate_pose(correspondences, cam: PinholeCamera,
                  max_iterations: int = 100, step_tol: float = 1e-10) -> PoseEstimate:
    """Estimate the camera pose T_cam_pattern that minimises the sum of
    squared reprojection errors over (pattern point, pixel) pairs.

    Initialisation is a homography for planar patterns and a 3x4 DLT
    otherwise, followed by Gauss-Newton refinement with Levenberg damping.
    """
    corr = list(correspondences)
    if len(corr) < 6:
        raise InsufficientDataError(f"pose estimation needs >= 6 correspondences, got {len(corr)}")
    obj = np.array([(p.as_array() if isinstance(p, Vec3) else np.asarray(p, dtype=float)) for p, _ in corr])
    px = np.array([np.asarray(uv, dtype=float) for _, uv in corr])
    if obj.shape[1] != 3 or px.shape[1] != 2:
        raise InvalidArgumentError("correspondences must pair 3D points with 2D pixels")

    xn, yn = undistort_pixel(cam, px[:, 0], px[:, 1])
    sv = np.linalg.svd(obj - obj.mean(axis=0), compute_uv=False)
    planar = sv[2] <= max(1e-9 * sv[0], 1e-12)
    init = _init_planar(obj, xn, yn) if planar else _init_dlt(obj, xn, yn)

    r = init.rotation.rotation_matrix()
    t = init.translation.as_array()
    res = _reproj_residuals(cam, r, t, obj, px)
    cost = float(res @ res)
    lam = 1e-3
    iterations = 0
    eps = 1e-7
    for iterations in range(1, max_iterations + 1):
        # Numeric Jacobian over [rotation-vector, translation] perturbations.
        jac = np.empty((res.size, 6))
        for j in range(3):
            w = np.zeros(3)
            w[j] = eps
            rp = _so3_exp(w) @ r
            rm = _so3_exp(-w) @ r
            jac[:, j] = (_reproj_residuals(cam, rp, t, obj, px)
                         - _reproj_residuals(cam, rm, t, obj, px)) / (2 * eps)
        for j in range(3):
            dt = np.zeros(3)
            dt[j] = eps
            jac[:, 3 + j] = (_reproj_residuals(cam, r, t + dt, obj, px)
                             - _reproj_residuals(cam, r, t - dt, obj, px)) / (2 * eps)
        jtj = jac.T @ jac
        jtr = jac.T @ res
        step = None
        while lam < 1e14:
            try:
                delta = np.linalg.solve(jtj + lam * np.diag(np.maximum(np.diag(jtj), 1e-12)), -jtr)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            r_new = _so3_exp(delta[:3]) @ r
            t_new = t + delta[3:]
            res_new = _reproj_residuals(cam, r_new, t_new, obj, px)
            cost_new = float(res_new @ res_new)
            if math.isfinite(cost_new) and cost_new <= cost:
                step = delta
                r, t, res, cost = r_new, t_new, res_new, cost_new
                lam = max(lam / 3.0, 1e-12)
                break
            lam *= 10
        if step is None:
            rms_now = math.sqrt(cost / obj.shape[0])
            if rms_now > 1e-6:
                raise NoConvergenceError(
                    f"pose refinement stalled with rms reprojection error {rms_now:.3e} px",
                    residual=rms_now,
                )
            break
        if np.linalg.norm(step) < step_tol:
            break

    rms_err = math.sqrt(cost / obj.shape[0])
    return PoseEstimate(RigidTransform.from_rt(r, t), rms_err, iterations)


def chain_extrinsics(t_a_pattern: RigidTransform, t_b_pattern: RigidTransform) -> RigidTransform:
    """Relative transform T_a_b from two poses of the same pattern placement."""
    return compose(t_a_pattern, invert(t_b_pattern))


def chain_extrinsics_views(view_pairs) -> RigidTransform:
    """Average T_a_b over multiple (T_a_pattern, T_b_pattern) views.

    Rotations are averaged as sign-aligned quaternion component means,
    which is adequate for the small angular spread of a rigid rig.
    """
    pairs = list(view_pairs)
    if not pairs:
        raise InsufficientDataError("no views supplied")
    quats = []
    trans = []
    for t_a_p, t_b_p in pairs:
        t_ab = chain_extrinsics(t_a_p, t_b_p)
        quats.append(t_ab.rotation.components())
        trans.append(t_ab.translation.as_array())
    quats = np.array(quats)
    ref = quats[0]
    signs = np.where(quats @ ref < 0, -1.0, 1.0)
    q_mean = (quats * signs[:, None]).mean(axis=0)
    q_mean = q_mean / np.linalg.norm(q_mean)
    t_mean = np.mean(trans, axis=0)
    return RigidTransform(UnitQuaternion(*q_mean), Vec3.from_array(t_mean))


def fit_scanline(points) -> ScanLineFit:
    """Total-least-squares line v = a*u + b through pixel observations.

    Minimises perpendicular distance; a vertical point set has no slope
    representation and is rejected.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if pts.shape[0] < 2:
        raise InsufficientDataError(f"scan-line fit needs >= 2 points, got {pts.shape[0]}")
    centroid = pts.mean(axis=0)
    d = pts - centroid
    if np.ptp(pts[:, 0]) < 1e-12:
        raise InvalidArgumentError("scan-line points share one u coordinate (vertical line unsupported)")
    cov = d.T @ d
    eigvals, eigvecs = np.linalg.eigh(cov)
    normal = eigvecs[:, 0]  # eigenvector of the smallest eigenvalue
    if abs(normal[1]) < 1e-12:
        raise InvalidArgumentError("fitted scan line is vertical (unsupported orientation)")
    a = -normal[0] / normal[1]
    b = centroid[1] - a * centroid[0]
    residuals = d @ normal
    return ScanLineFit(float(a), float(b), float(np.sqrt(np.mean(residuals**2))))
