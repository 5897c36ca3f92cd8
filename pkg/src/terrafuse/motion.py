"""Vehicle poses over time: a correspondence-based rigid motion estimator
(standing in for visual odometry), pose accumulation, and interpolation."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyTrajectoryError, InsufficientDataError, InvalidArgumentError
from .geomcore import RigidTransform, UnitQuaternion, Vec3, compose


@dataclass(frozen=True)
class Correspondence3D:
    """A 3D point seen in two consecutive camera frames."""

    p_prev: Vec3
    p_curr: Vec3


@dataclass(frozen=True)
class MotionEstimate:
    transform: RigidTransform  # maps prev-frame coordinates to curr-frame
    inlier_count: int
    inlier_mask: np.ndarray


@dataclass(frozen=True)
class Trajectory:
    """Time-stamped vehicle poses T_world_vehicle with strictly increasing t."""

    times: np.ndarray
    quats: np.ndarray  # (N, 4) as (w, x, y, z)
    trans: np.ndarray  # (N, 3)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if times.size and np.any(np.diff(times) <= 0):
            raise InvalidArgumentError("trajectory timestamps must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "quats", np.asarray(self.quats, dtype=float).reshape(-1, 4))
        object.__setattr__(self, "trans", np.asarray(self.trans, dtype=float).reshape(-1, 3))

    def __len__(self) -> int:
        return self.times.size

    def pose(self, i: int) -> RigidTransform:
        q = self.quats[i]
        return RigidTransform(UnitQuaternion(q[0], q[1], q[2], q[3]), Vec3.from_array(self.trans[i]))

    @staticmethod
    def from_poses(times, poses) -> "Trajectory":
        quats = np.array([p.rotation.components() for p in poses])
        trans = np.array([p.translation.as_array() for p in poses])
        return Trajectory(np.asarray(times, dtype=float), quats, trans)


def kabsch(prev: np.ndarray, curr: np.ndarray, weights=None) -> RigidTransform:
    """Least-squares rigid transform mapping prev points onto curr points.

    Classic SVD solution with the determinant sign fix, optionally
    weighted per correspondence.
    """
    a = np.asarray(prev, dtype=float)
    b = np.asarray(curr, dtype=float)
    if a.shape != b.shape or a.shape[0] < 3:
        raise InsufficientDataError("rigid fit needs >= 3 paired points")
    if weights is None:
        w = np.ones(a.shape[0])
    else:
        w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    ca = w @ a
    cb = w @ b
    h = (a - ca).T @ ((b - cb) * w[:, None])
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = cb - r @ ca
    return RigidTransform.from_rt(r, t)


def _as_arrays(corrs):
    prev = np.array([c.p_prev.as_array() for c in corrs])
    curr = np.array([c.p_curr.as_array() for c in corrs])
    return prev, curr


def estimate_motion(corrs, iterations: int = 200, inlier_tol: float = 0.02,
                    seed: int = 0) -> MotionEstimate:
    """RANSAC over minimal 3-point rigid fits followed by a full Kabsch
    refit on the inlier set. Deterministic for a fixed seed.
    """
    corrs = list(corrs)
    if len(corrs) < 3:
        raise InsufficientDataError(f"motion estimation needs >= 3 correspondences, got {len(corrs)}")
    prev, curr = _as_arrays(corrs)
    sv = np.linalg.svd(prev - prev.mean(axis=0), compute_uv=False)
    if sv[1] <= max(1e-9 * sv[0], 1e-12):
        raise InsufficientDataError("correspondences are collinear; rotation is unobservable")

    n = len(corrs)
    rng = np.random.default_rng(seed)
    best_mask = None
    best_count = -1
    for _ in range(iterations):
        idx = rng.choice(n, size=3, replace=False)
        tri = prev[idx]
        # Reject nearly collinear minimal samples.
        if np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0])) < 1e-12:
            continue
        try:
            t = kabsch(tri, curr[idx])
        except InsufficientDataError:
            continue
        err = np.linalg.norm(prev @ t.rotation.rotation_matrix().T
                             + t.translation.as_array() - curr, axis=1)
        mask = err <= inlier_tol
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
    if best_mask is None or best_count < 3:
        raise InsufficientDataError("RANSAC found no 3-point model with enough inliers")
    refined = kabsch(prev[best_mask], curr[best_mask])
    return MotionEstimate(refined, best_count, best_mask)


def accumulate(relatives, t0: RigidTransform | None = None) -> list[RigidTransform]:
    """Running composition of relative transforms starting from t0.

    Returns len(relatives) + 1 poses; pose_k = compose(pose_{k-1}, rel_k).
    """
    pose = t0 if t0 is not None else RigidTransform.identity()
    poses = [pose]
    for rel in relatives:
        pose = compose(pose, rel)
        poses.append(pose)
    return poses


def pose_at(traj: Trajectory, t: float) -> tuple[RigidTransform, bool]:
    """Interpolated pose at time t: linear in translation, shortest-arc
    slerp in rotation. Outside the time range the nearest pose is returned
    with the extrapolation flag set."""
    if len(traj) == 0:
        raise EmptyTrajectoryError("cannot interpolate an empty trajectory")
    times = traj.times
    if t <= times[0]:
        return traj.pose(0), t < times[0]
    if t >= times[-1]:
        return traj.pose(len(traj) - 1), t > times[-1]
    hi = bisect.bisect_right(times, t)
    lo = hi - 1
    if times[lo] == t:
        return traj.pose(lo), False
    alpha = (t - times[lo]) / (times[hi] - times[lo])
    p_lo = traj.pose(lo)
    p_hi = traj.pose(hi)
    trans = (1.0 - alpha) * p_lo.translation.as_array() + alpha * p_hi.translation.as_array()
    rot = p_lo.rotation.slerp(p_hi.rotation, alpha)
    return RigidTransform(rot, Vec3.from_array(trans)), False
