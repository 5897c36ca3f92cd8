"""Stereo pipeline: rectification, semi-global matching, triangulation,
statistical outlier removal, and voxel-grid downsampling.

Matching cost is a 5x5 census transform with Hamming distance, aggregated
along 4 or 8 one-dimensional paths with the usual P1/P2 smoothness
penalties, left-right consistency check and parabolic sub-pixel
refinement. All operations are deterministic.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

from .calib import CalibrationSet
from .errors import InvalidArgumentError
from .geomcore import PinholeCamera, RigidTransform, UnitQuaternion, Vec3, distort_normalized

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ImageBuffer:
    """Row-major image: (height, width) for single channel or
    (height, width, 3) for color. 8-bit images are uint8, 16-bit uint16."""

    width: int
    height: int
    channels: int
    bit_depth: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise InvalidArgumentError(f"channels must be 1 or 3, got {self.channels}")
        if self.bit_depth not in (8, 16):
            raise InvalidArgumentError(f"bit_depth must be 8 or 16, got {self.bit_depth}")
        expected_dtype = np.uint8 if self.bit_depth == 8 else np.uint16
        px = np.asarray(self.pixels)
        if px.dtype != expected_dtype:
            raise InvalidArgumentError(f"{self.bit_depth}-bit image requires dtype {expected_dtype}, got {px.dtype}")
        expected_shape = (self.height, self.width) if self.channels == 1 else (self.height, self.width, 3)
        if px.shape != expected_shape:
            raise InvalidArgumentError(f"pixel array shape {px.shape} does not match {expected_shape}")
        object.__setattr__(self, "pixels", px)

    def gray(self) -> np.ndarray:
        """Rec.601 luma as float64."""
        if self.channels == 1:
            return self.pixels.astype(float)
        p = self.pixels.astype(float)
        return 0.299 * p[..., 0] + 0.587 * p[..., 1] + 0.114 * p[..., 2]


@dataclass(frozen=True)
class DisparityMap:
    width: int
    height: int
    d: np.ndarray  # float32, NaN marks invalid pixels

    @property
    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.d)


@dataclass(frozen=True)
class PointCloud:
    """Colored 3D points with the frame they are expressed in recorded."""

    positions: np.ndarray  # (N, 3) float64
    colors: np.ndarray     # (N, 3) uint8
    frame_ids: np.ndarray  # (N,) int32
    frame: str = "camera"

    def __post_init__(self):
        object.__setattr__(self, "positions", np.asarray(self.positions, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "colors", np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3))
        object.__setattr__(self, "frame_ids", np.asarray(self.frame_ids, dtype=np.int32).reshape(-1))

    def __len__(self) -> int:
        return self.positions.shape[0]

    @staticmethod
    def empty(frame: str = "camera") -> "PointCloud":
        return PointCloud(np.empty((0, 3)), np.empty((0, 3), dtype=np.uint8),
                          np.empty(0, dtype=np.int32), frame)


@dataclass(frozen=True)
class SgmParams:
    d_max: int = 128
    p1: float = 10.0
    p2: float = 120.0
    paths: int = 8
    uniqueness: float = 0.05

    def __post_init__(self):
        if self.d_max <= 0:
            raise InvalidArgumentError(f"d_max must be positive, got {self.d_max}")
        if self.p2 < self.p1:
            raise InvalidArgumentError(f"P2 ({self.p2}) must be >= P1 ({self.p1})")
        if self.p1 <= 0:
            raise InvalidArgumentError(f"P1 must be positive, got {self.p1}")
        if self.paths not in (4, 8):
            raise InvalidArgumentError(f"paths must be 4 or 8, got {self.paths}")


@dataclass(frozen=True)
class RectifiedRig:
    """Geometry of a rectified pair: one shared distortion-free camera,
    a pure-x baseline, and the rotation from the original left camera
    frame into the rectified frame."""

    cam: PinholeCamera
    baseline: float
    t_rect_left: RigidTransform


def bilinear_sample(pixels: np.ndarray, u, v, fill: float = 0.0) -> np.ndarray:
    """Bilinear interpolation at (u, v); exact for uniform neighborhoods.

    Coordinates outside [0, W-1] x [0, H-1] return ``fill``.
    """
    img = np.asarray(pixels, dtype=float)
    h, w = img.shape[:2]
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    inside = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uc = np.clip(u, 0, w - 1)
    vc = np.clip(v, 0, h - 1)
    x0 = np.clip(np.floor(uc).astype(int), 0, w - 2) if w > 1 else np.zeros_like(uc, dtype=int)
    y0 = np.clip(np.floor(vc).astype(int), 0, h - 2) if h > 1 else np.zeros_like(vc, dtype=int)
    fx = uc - x0
    fy = vc - y0
    if w == 1:
        fx = np.zeros_like(fx)
    if h == 1:
        fy = np.zeros_like(fy)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    c00 = img[y0, x0]
    c10 = img[y0, x1]
    c01 = img[y1, x0]
    c11 = img[y1, x1]
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
        inside_b = inside[..., None]
    else:
        inside_b = inside
    # Difference form: exact when the four neighbors are equal.
    val = c00 + fx * (c10 - c00) + fy * (c01 - c00) + fx * fy * (c00 + c11 - c10 - c01)
    return np.where(inside_b, val, fill)


# ---------------------------------------------------------------------------
# Rectification


def _rectifying_rotation(calib: CalibrationSet) -> np.ndarray:
    """Rotation R_rect mapping left-camera coordinates to the rectified
    frame: x along the baseline, z near the average optical axis."""
    r_rl = calib.t_right_left.rotation.rotation_matrix()
    t_rl = calib.t_right_left.translation.as_array()
    c_right = -r_rl.T @ t_rl  # right camera center in left coordinates
    e1 = c_right / np.linalg.norm(c_right)
    z_left = np.array([0.0, 0.0, 1.0])
    z_right = r_rl.T @ np.array([0.0, 0.0, 1.0])
    z_avg = z_left + z_right
    z_avg = z_avg / np.linalg.norm(z_avg)
    e2 = np.cross(z_avg, e1)
    e2 = e2 / np.linalg.norm(e2)
    e3 = np.cross(e1, e2)
    return np.vstack([e1, e2, e3])


def _warp(img: ImageBuffer, src_cam: PinholeCamera, r_src_rect: np.ndarray,
          new_cam: PinholeCamera) -> ImageBuffer:
    us, vs = np.meshgrid(np.arange(new_cam.width, dtype=float),
                         np.arange(new_cam.height, dtype=float))
    xn = (us - new_cam.cx) / new_cam.fx
    yn = (vs - new_cam.cy) / new_cam.fy
    dirs = np.stack([xn, yn, np.ones_like(xn)], axis=-1)
    d_src = dirs @ r_src_rect.T
    with np.errstate(divide="ignore", invalid="ignore"):
        xs = d_src[..., 0] / d_src[..., 2]
        ys = d_src[..., 1] / d_src[..., 2]
    xd, yd = distort_normalized(src_cam, xs, ys)
    u_src = src_cam.fx * xd + src_cam.cx
    v_src = src_cam.fy * yd + src_cam.cy
    bad = ~np.isfinite(u_src) | ~np.isfinite(v_src) | (d_src[..., 2] <= 0)
    u_src = np.where(bad, -1e9, u_src)
    v_src = np.where(bad, -1e9, v_src)
    out = bilinear_sample(img.pixels, u_src, v_src, fill=0.0)
    limit = 255 if img.bit_depth == 8 else 65535
    dtype = np.uint8 if img.bit_depth == 8 else np.uint16
    out = np.clip(np.rint(out), 0, limit).astype(dtype)
    return ImageBuffer(new_cam.width, new_cam.height, img.channels, img.bit_depth, out)


def rectify(calib: CalibrationSet, left: ImageBuffer, right: ImageBuffer):
    """Warp a stereo pair onto a common distortion-free geometry with
    horizontal epipolar lines. Returns (left, right, RectifiedRig)."""
    for img, cam, name in ((left, calib.left_cam, "left"), (right, calib.right_cam, "right")):
        if img.width != cam.width or img.height != cam.height:
            raise InvalidArgumentError(
                f"{name} image is {img.width}x{img.height} but its camera says "
                f"{cam.width}x{cam.height}"
            )
    r_rect = _rectifying_rotation(calib)
    lc, rc = calib.left_cam, calib.right_cam
    f_new = (lc.fx + lc.fy + rc.fx + rc.fy) / 4.0
    cx_new = (lc.cx + rc.cx) / 2.0
    cy_new = (lc.cy + rc.cy) / 2.0
    new_cam = PinholeCamera(fx=f_new, fy=f_new, cx=cx_new, cy=cy_new,
                            width=lc.width, height=lc.height)
    r_rl = calib.t_right_left.rotation.rotation_matrix()
    left_rect = _warp(left, lc, r_rect.T, new_cam)
    right_rect = _warp(right, rc, r_rl @ r_rect.T, new_cam)
    rig = RectifiedRig(
        cam=new_cam,
        baseline=calib.baseline,
        t_rect_left=RigidTransform(UnitQuaternion.from_rotation_matrix(r_rect), Vec3.zero()),
    )
    return left_rect, right_rect, rig


# ---------------------------------------------------------------------------
# Semi-global matching


def _census5(gray: np.ndarray) -> np.ndarray:
    h, w = gray.shape
    padded = np.pad(gray, 2, mode="edge")
    code = np.zeros((h, w), dtype=np.uint32)
    for dy in range(-2, 3):
        for dx in range(-2, 3):
            if dy == 0 and dx == 0:
                continue
            neighbor = padded[2 + dy:2 + dy + h, 2 + dx:2 + dx + w]
            code = (code << np.uint32(1)) | (neighbor < gray).astype(np.uint32)
    return code


_NO_MATCH_COST = 64.0  # > max 24-bit hamming distance; penalises x < d cells


def _census_cost_volume(cl: np.ndarray, cr: np.ndarray, d_max: int) -> np.ndarray:
    h, w = cl.shape
    vol = np.full((h, w, d_max + 1), _NO_MATCH_COST, dtype=np.float32)
    for d in range(d_max + 1):
        if d == 0:
            vol[:, :, 0] = np.bitwise_count(cl ^ cr)
        elif d < w:
            vol[:, d:, d] = np.bitwise_count(cl[:, d:] ^ cr[:, :-d])
    return vol


_DIRECTIONS_8 = np.array(
    [(0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (1, -1), (-1, 1), (-1, -1)], dtype=np.int64
)
_DIRECTIONS_4 = _DIRECTIONS_8[:4]


@njit(cache=True)
def _aggregate_one(cost, p1, p2, dr, dc, lbuf, acc):
    h, w, nd = cost.shape
    if dr >= 0:
        r_start, r_stop, r_step = 0, h, 1
    else:
        r_start, r_stop, r_step = h - 1, -1, -1
    if dc >= 0:
        c_start, c_stop, c_step = 0, w, 1
    else:
        c_start, c_stop, c_step = w - 1, -1, -1
    for r in range(r_start, r_stop, r_step):
        for c in range(c_start, c_stop, c_step):
            pr = r - dr
            pc = c - dc
            if 0 <= pr < h and 0 <= pc < w:
                min_prev = lbuf[pr, pc, 0]
                for k in range(1, nd):
                    if lbuf[pr, pc, k] < min_prev:
                        min_prev = lbuf[pr, pc, k]
                for k in range(nd):
                    best = lbuf[pr, pc, k]
                    if k > 0 and lbuf[pr, pc, k - 1] + p1 < best:
                        best = lbuf[pr, pc, k - 1] + p1
                    if k + 1 < nd and lbuf[pr, pc, k + 1] + p1 < best:
                        best = lbuf[pr, pc, k + 1] + p1
                    if min_prev + p2 < best:
                        best = min_prev + p2
                    lbuf[r, c, k] = cost[r, c, k] + best - min_prev
            else:
                for k in range(nd):
                    lbuf[r, c, k] = cost[r, c, k]
    for r in range(h):
        for c in range(w):
            for k in range(nd):
                acc[r, c, k] += lbuf[r, c, k]


def _aggregate(cost: np.ndarray, params: SgmParams) -> np.ndarray:
    dirs = _DIRECTIONS_8 if params.paths == 8 else _DIRECTIONS_4
    acc = np.zeros_like(cost)
    lbuf = np.empty_like(cost)
    for dr, dc in dirs:
        _aggregate_one(cost, np.float32(params.p1), np.float32(params.p2),
                       int(dr), int(dc), lbuf, acc)
    return acc


def sgm_disparity(left: ImageBuffer, right: ImageBuffer,
                  params: SgmParams = SgmParams()) -> DisparityMap:
    """Disparity of a rectified pair via census-cost semi-global matching.

    Pixels failing the left-right consistency check (tolerance 1 px) or
    the uniqueness test are marked invalid (NaN).
    """
    if (left.width, left.height) != (right.width, right.height):
        raise InvalidArgumentError("stereo pair images must have equal size")
    h, w = left.height, left.width
    d_max = min(params.d_max, w - 1)
    cl = _census5(left.gray())
    cr = _census5(right.gray())
    cost = _census_cost_volume(cl, cr, d_max)
    s = _aggregate(cost, params)
    nd = d_max + 1

    d0 = np.argmin(s, axis=2)
    s_min = np.take_along_axis(s, d0[:, :, None], axis=2)[:, :, 0]

    # Uniqueness on the raw matching cost: the winner must beat every
    # candidate outside d0 +/- 1 by a margin, otherwise there is no signal
    # (textureless or repetitive surface) and the pixel is invalidated.
    # Aggregated costs cannot be used here: path penalties alone separate
    # candidates even on a constant image.
    rows, cols = np.indices((h, w))
    raw_min = np.take_along_axis(cost, d0[:, :, None], axis=2)[:, :, 0]
    c2 = cost.copy()
    for off in (-1, 0, 1):
        dn = np.clip(d0 + off, 0, nd - 1)
        c2[rows, cols, dn] = np.inf
    raw_min2 = c2.min(axis=2)
    unique_ok = raw_min2 - raw_min > params.uniqueness * np.maximum(raw_min, 1.0)
    unique_ok &= np.isfinite(raw_min2)

    # Parabolic sub-pixel refinement.
    interior = (d0 > 0) & (d0 < nd - 1)
    dm = np.clip(d0 - 1, 0, nd - 1)
    dp = np.clip(d0 + 1, 0, nd - 1)
    c_m = np.take_along_axis(s, dm[:, :, None], axis=2)[:, :, 0]
    c_p = np.take_along_axis(s, dp[:, :, None], axis=2)[:, :, 0]
    denom = c_m + c_p - 2.0 * s_min
    with np.errstate(divide="ignore", invalid="ignore"):
        offset = np.where((denom > 1e-9) & interior, (c_m - c_p) / (2.0 * denom), 0.0)
    offset = np.clip(offset, -0.5, 0.5)
    disp = d0.astype(np.float32) + offset.astype(np.float32)

    # Right disparity from the same aggregated volume: S_r[y, x, d] = S[y, x+d, d].
    xs = np.arange(w)
    ds = np.arange(nd)
    xr_idx = xs[:, None] + ds[None, :]
    in_range = xr_idx < w
    xr_idx = np.minimum(xr_idx, w - 1)
    s_right = s[:, xr_idx, ds[None, :]]
    s_right = np.where(in_range[None, :, :], s_right, np.inf)
    d_right = np.argmin(s_right, axis=2)

    xr = cols - np.rint(disp).astype(int)
    lr_ok = (xr >= 0) & (xr < w)
    xr_c = np.clip(xr, 0, w - 1)
    lr_ok &= np.abs(disp - d_right[rows, xr_c]) <= 1.0

    valid = unique_ok & lr_ok
    out = np.where(valid, disp, np.nan).astype(np.float32)
    return DisparityMap(w, h, out)


# ---------------------------------------------------------------------------
# 3D generation and cloud filters


def triangulate(disp: DisparityMap, rig: RectifiedRig, left_rgb: ImageBuffer,
                frame_id: int = 0, d_min: float = 1.0) -> PointCloud:
    """Back-project valid disparities: Z = f*b/d in the rectified left
    camera frame, colors sampled from the left image."""
    mask = disp.valid_mask & (disp.d > d_min)
    vs, us = np.nonzero(mask)
    if vs.size == 0:
        return PointCloud.empty("camera")
    d = disp.d[vs, us].astype(float)
    f = rig.cam.fx
    z = f * rig.baseline / d
    x = (us - rig.cam.cx) * z / f
    y = (vs - rig.cam.cy) * z / rig.cam.fy
    if left_rgb.channels == 3:
        colors = left_rgb.pixels[vs, us]
    else:
        g = left_rgb.pixels[vs, us]
        colors = np.stack([g, g, g], axis=-1)
    if left_rgb.bit_depth == 16:
        colors = (colors.astype(np.uint32) >> 8).astype(np.uint8)
    ids = np.full(vs.size, frame_id, dtype=np.int32)
    return PointCloud(np.column_stack([x, y, z]), colors.astype(np.uint8), ids, "camera")


def statistical_outlier_filter(cloud: PointCloud, k: int = 8, alpha: float = 1.0) -> PointCloud:
    """Drop points whose mean distance to their k nearest neighbors
    exceeds mean + alpha * std of that statistic over the cloud."""
    if k < 1:
        raise InvalidArgumentError(f"k must be >= 1, got {k}")
    n = len(cloud)
    if n == 0:
        return cloud
    if n < k + 1:
        logger.warning("outlier filter skipped: cloud has %d points, need > %d", n, k)
        return cloud
    tree = cKDTree(cloud.positions)
    dists, _ = tree.query(cloud.positions, k=k + 1)
    mean_d = dists[:, 1:].mean(axis=1)
    mu = mean_d.mean()
    sigma = mean_d.std()
    keep = mean_d <= mu + alpha * sigma
    return PointCloud(cloud.positions[keep], cloud.colors[keep],
                      cloud.frame_ids[keep], cloud.frame)


def voxel_downsample(cloud: PointCloud, cell: float) -> PointCloud:
    """One point per occupied cell: centroid position, channel-averaged
    (rounded) color. Output is ordered by cell index."""
    if cell <= 0:
        raise InvalidArgumentError(f"cell size must be positive, got {cell}")
    n = len(cloud)
    if n == 0:
        return cloud
    keys = np.floor(cloud.positions / cell).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    m = uniq.shape[0]
    counts = np.bincount(inverse, minlength=m).astype(float)
    pos = np.empty((m, 3))
    col = np.empty((m, 3))
    for c in range(3):
        pos[:, c] = np.bincount(inverse, weights=cloud.positions[:, c], minlength=m) / counts
        col[:, c] = np.bincount(inverse, weights=cloud.colors[:, c].astype(float), minlength=m) / counts
    colors = np.clip(np.rint(col), 0, 255).astype(np.uint8)
    frame_ids = np.zeros(m, dtype=np.int32)
    np.maximum.at(frame_ids, inverse, cloud.frame_ids)
    return PointCloud(pos, colors, frame_ids, cloud.frame)
