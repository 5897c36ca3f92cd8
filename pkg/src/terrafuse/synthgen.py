"""Synthetic rover-dataset generator with exact ground truth.

A world is a straight-line run over ordered terrain segments, each with a
material that defines color, thermal radiance, a piecewise-linear
reflectance curve, a vertical-vibration RMS target, and height roughness.
All surface texture is derived from hash-based lattice noise anchored to
world coordinates, so every sensor (and both stereo eyes) observes the
same surface and regeneration is bit-identical for a fixed seed.

The accelerometer channel is Gaussian noise passed through a local energy
normalisation (window of 51 samples, the per-patch window size), so the
RMS of any patch-sized window tracks the material target closely instead
of fluctuating with the ~1/sqrt(2M) spread of raw white noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calib import CalibrationSet, ScanLine, save_calibration
from .datasetio import FrameBundle, write_pgm16, write_ppm, write_visnir_line
from .errors import EmptyWindowError, InvalidArgumentError
from .fusionmap import VisNirLine
from .geomcore import (
    PinholeCamera,
    RigidTransform,
    UnitQuaternion,
    Vec3,
    compose,
    invert,
    project_points,
    quat_rotate,
)
from .imuproc import GRAVITY, ImuSample, window_for_interval
from .stereo import ImageBuffer
from .terrafeat import Footprint, GroundPatch, patch_features

DRIFT_CELL_M = 0.35    # correlation length of slow appearance drift
FINE_CELL_M = 0.02     # correlation length of pixel-scale texture
MID_CELL_M = 0.09      # second texture octave for far-range matching
HEIGHT_CELL_M = 0.15


# ---------------------------------------------------------------------------
# Deterministic lattice noise


def _mix64(ix: np.ndarray, iy: np.ndarray, salt: int) -> np.ndarray:
    with np.errstate(over="ignore"):
        h = ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
        h ^= iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
        h ^= np.uint64(salt & 0xFFFFFFFFFFFFFFFF)
        h ^= h >> np.uint64(30)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(27)
        h *= np.uint64(0x94D049BB133111EB)
        h ^= h >> np.uint64(31)
    return h.astype(np.float64) * (1.0 / 2.0**64)


def value_noise(x, y, cell: float, salt: int) -> np.ndarray:
    """Smooth lattice noise in [-1, 1], a pure function of world position."""
    gx = np.asarray(x, dtype=float) / cell
    gy = np.asarray(y, dtype=float) / cell
    ix = np.floor(gx).astype(np.int64)
    iy = np.floor(gy).astype(np.int64)
    fx = gx - ix
    fy = gy - iy
    sx = fx * fx * (3.0 - 2.0 * fx)
    sy = fy * fy * (3.0 - 2.0 * fy)
    v00 = _mix64(ix, iy, salt)
    v10 = _mix64(ix + 1, iy, salt)
    v01 = _mix64(ix, iy + 1, salt)
    v11 = _mix64(ix + 1, iy + 1, salt)
    v = v00 + sx * (v10 - v00) + sy * (v01 - v00) + sx * sy * (v00 + v11 - v10 - v01)
    return 2.0 * v - 1.0


# ---------------------------------------------------------------------------
# Materials and world specification


@dataclass(frozen=True)
class Material:
    """Ground surface signature used by every synthetic sensor channel."""

    name: str
    rgb: tuple = (128.0, 128.0, 128.0)
    rgb_noise: float = 12.0       # pixel-scale texture amplitude, counts
    rgb_drift: float = 6.0        # slow spatial drift amplitude, counts
    thermal_counts: float = 20000.0
    thermal_noise: float = 250.0
    thermal_drift: float = 800.0
    reflectance_knots: tuple = ((400.0, 0.15), (1000.0, 0.25))  # (nm, value)
    ndvi_tilt: float = 0.02       # red/NIR see-saw drift amplitude
    rms_az_target: float = 0.05   # m/s^2
    roughness: float = 0.01       # height-field amplitude, m

    def __post_init__(self):
        if any(v < 0 for _, v in self.reflectance_knots):
            raise InvalidArgumentError(f"material {self.name}: reflectance must be >= 0")
        if self.rms_az_target < 0:
            raise InvalidArgumentError(f"material {self.name}: rms_az_target must be >= 0")

    def reflectance_at(self, wavelengths_nm) -> np.ndarray:
        knots = np.asarray(self.reflectance_knots, dtype=float)
        return np.interp(np.asarray(wavelengths_nm, dtype=float), knots[:, 0], knots[:, 1])


def default_materials() -> dict:
    """Grass / ploughed / paved signature table.

    Thermal counts are ordinal (paved warmest), NDVI sits near 0.41 for
    grass and below zero for the bare surfaces, vibration RMS targets are
    0.050 / 0.065 / 0.085 m/s^2.
    """
    return {
        "grass": Material(
            name="grass", rgb=(62.0, 118.0, 48.0), rgb_noise=14.0, rgb_drift=7.0,
            thermal_counts=12000.0, thermal_noise=250.0, thermal_drift=700.0,
            reflectance_knots=((400.0, 0.05), (550.0, 0.12), (670.0, 0.21),
                               (700.0, 0.35), (760.0, 0.48), (800.0, 0.50), (1000.0, 0.52)),
            ndvi_tilt=0.02, rms_az_target=0.050, roughness=0.006,
        ),
        "ploughed": Material(
            name="ploughed", rgb=(96.0, 74.0, 58.0), rgb_noise=16.0, rgb_drift=8.0,
            thermal_counts=20000.0, thermal_noise=300.0, thermal_drift=900.0,
            reflectance_knots=((400.0, 0.10), (550.0, 0.22), (670.0, 0.30),
                               (800.0, 0.2714285714285714), (1000.0, 0.26)),
            ndvi_tilt=0.02, rms_az_target=0.065, roughness=0.015,
        ),
        "paved": Material(
            name="paved", rgb=(126.0, 126.0, 130.0), rgb_noise=12.0, rgb_drift=6.0,
            thermal_counts=30000.0, thermal_noise=350.0, thermal_drift=1100.0,
            reflectance_knots=((400.0, 0.16), (550.0, 0.22), (670.0, 0.26),
                               (800.0, 0.21272727272727273), (1000.0, 0.21)),
            ndvi_tilt=0.015, rms_az_target=0.085, roughness=0.003,
        ),
    }


@dataclass(frozen=True)
class Segment:
    material: str
    length: float

    def __post_init__(self):
        if self.length <= 0:
            raise InvalidArgumentError(f"segment length must be positive, got {self.length}")


@dataclass(frozen=True)
class Box:
    """Axis-aligned obstacle sitting on the ground."""

    cx: float
    cy: float
    half_x: float
    half_y: float
    height: float
    material: str = "paved"


@dataclass(frozen=True)
class SensorRates:
    stereo: float = 7.5
    thermal: float = 15.0
    visnir: float = 128.0
    imu: float = 128.0

    def __post_init__(self):
        for name in ("stereo", "thermal", "visnir", "imu"):
            v = getattr(self, name)
            if v < 0:
                raise InvalidArgumentError(f"rate {name} must be >= 0 (0 disables), got {v}")
        if self.stereo <= 0 or self.imu <= 0:
            raise InvalidArgumentError("stereo and imu rates must be positive")


@dataclass(frozen=True)
class WorldSpec:
    """Declarative description of a synthetic run."""

    segments: tuple = (Segment("grass", 8.0), Segment("paved", 8.0))
    speed: float = 0.8
    obstacles: tuple = ()
    rates: SensorRates = field(default_factory=SensorRates)
    materials: dict | None = None  # overrides default_materials()
    image_width: int = 128
    image_height: int = 96
    focal_px: float = 110.0
    baseline: float = 0.04
    thermal_width: int = 64
    thermal_height: int = 48
    thermal_focal_px: float = 55.0
    cam_height: float = 0.40
    cam_pitch_deg: float = 25.0
    cam_forward: float = 0.10
    visnir_cols: int = 64
    band_start_nm: float = 400.0
    band_step_nm: float = 10.0
    band_count: int = 61
    scanline_distance: float = 2.0  # ground distance of the scan line, m

    def __post_init__(self):
        if not self.segments:
            raise InvalidArgumentError("world needs at least one segment")
        if self.speed <= 0:
            raise InvalidArgumentError(f"speed must be positive, got {self.speed}")
        if self.band_count < 2:
            raise InvalidArgumentError("need at least 2 spectral bands")


def build_default_calibration(spec: WorldSpec) -> CalibrationSet:
    """Rig calibration implied by a world spec (exact, zero distortion)."""
    w, h = spec.image_width, spec.image_height
    left = PinholeCamera(spec.focal_px, spec.focal_px, (w - 1) / 2.0, (h - 1) / 2.0, w, h)
    right = left
    tw, th = spec.thermal_width, spec.thermal_height
    thermal = PinholeCamera(spec.thermal_focal_px, spec.thermal_focal_px,
                            (tw - 1) / 2.0, (th - 1) / 2.0, tw, th)
    theta = math.radians(spec.cam_pitch_deg)
    r_vehicle_cam = np.array([
        [0.0, -math.sin(theta), math.cos(theta)],
        [-1.0, 0.0, 0.0],
        [0.0, -math.cos(theta), -math.sin(theta)],
    ])
    t_vehicle_left = RigidTransform(
        UnitQuaternion.from_rotation_matrix(r_vehicle_cam),
        Vec3(spec.cam_forward, spec.baseline / 2.0, spec.cam_height),
    )
    t_right_left = RigidTransform(UnitQuaternion.identity(), Vec3(-spec.baseline, 0.0, 0.0))
    t_left_thermal = RigidTransform(
        UnitQuaternion.from_axis_angle((0.25, 0.45, 0.86), 0.02),
        Vec3(0.05, -0.03, 0.01),
    )
    # Scan line: the image row where ground scanline_distance ahead of the
    # vehicle projects on the optical axis column.
    ground = Vec3(spec.scanline_distance, spec.baseline / 2.0, 0.0)
    p_cam = invert(t_vehicle_left).apply(ground)
    v_row = left.fy * (p_cam.y / p_cam.z) + left.cy
    bands = spec.band_start_nm + spec.band_step_nm * np.arange(spec.band_count)
    scanline = ScanLine(a=0.0, b=float(v_row), band_centers=bands)
    return CalibrationSet(
        left_cam=left, right_cam=right, thermal_cam=thermal,
        t_right_left=t_right_left, t_vehicle_left=t_vehicle_left,
        t_left_thermal=t_left_thermal, scanline=scanline, baseline=spec.baseline,
    )


class World:
    """Realised synthetic world: deterministic for a given (spec, seed)."""

    def __init__(self, spec: WorldSpec, seed: int):
        self.spec = spec
        self.seed = int(seed)
        table = default_materials()
        if spec.materials:
            table.update(spec.materials)
        self.materials = [table[s.material] for s in spec.segments]
        self._box_material_idx = []
        for box in spec.obstacles:
            if box.material not in table:
                raise InvalidArgumentError(f"obstacle material {box.material!r} unknown")
            names = [m.name for m in self.materials]
            if box.material not in names:
                self.materials.append(table[box.material])
            self._box_material_idx.append([m.name for m in self.materials].index(box.material))
        self._table = table
        self.boundaries = np.cumsum([s.length for s in spec.segments])
        self.total_length = float(self.boundaries[-1])
        self.duration = self.total_length / spec.speed
        self.calibration = build_default_calibration(spec)
        self._salt = (self.seed * 0x9E3779B9) & 0xFFFFFFFF
        self._accel_cache = None
        self._imu_cache = None
        rng = np.random.default_rng(self.seed)
        self._landmarks = self._make_landmarks(rng)

    # -- terrain fields ----------------------------------------------------

    def material_index_at(self, x) -> np.ndarray:
        xs = np.asarray(x, dtype=float)
        idx = np.searchsorted(self.boundaries, xs, side="right")
        return np.clip(idx, 0, len(self.spec.segments) - 1)

    def material_at(self, x) -> np.ndarray:
        idx = self.material_index_at(x)
        names = np.array([m.name for m in self.materials])
        return names[idx]

    def _per_material(self, attr: str) -> np.ndarray:
        return np.array([getattr(m, attr) for m in self.materials], dtype=float)

    def height_at(self, x, y) -> np.ndarray:
        idx = self.material_index_at(x)
        amp = self._per_material("roughness")[idx]
        return amp * value_noise(x, y, HEIGHT_CELL_M, self._salt + 11)

    def color_at(self, x, y, material_idx=None) -> np.ndarray:
        """Unquantized RGB (N, 3) in counts: material base color plus slow
        drift and two texture octaves (fine for near range, mid so distant
        ground keeps matchable structure)."""
        idx = self.material_index_at(x) if material_idx is None else material_idx
        base = np.array([m.rgb for m in self.materials], dtype=float)[idx]
        drift_amp = self._per_material("rgb_drift")[idx][:, None]
        noise_amp = self._per_material("rgb_noise")[idx][:, None]
        drift = np.stack([value_noise(x, y, DRIFT_CELL_M, self._salt + 21 + c) for c in range(3)], axis=-1)
        fine = np.stack([value_noise(x, y, FINE_CELL_M, self._salt + 31 + c) for c in range(3)], axis=-1)
        mid = np.stack([value_noise(x, y, MID_CELL_M, self._salt + 61 + c) for c in range(3)], axis=-1)
        return base + drift_amp * drift + noise_amp * (0.7 * fine + 0.7 * mid)

    def thermal_at(self, x, y) -> np.ndarray:
        idx = self.material_index_at(x)
        base = self._per_material("thermal_counts")[idx]
        drift = self._per_material("thermal_drift")[idx] * value_noise(x, y, DRIFT_CELL_M, self._salt + 41)
        fine = self._per_material("thermal_noise")[idx] * value_noise(x, y, 0.03, self._salt + 42)
        return base + drift + fine

    def tilt_at(self, x, y) -> np.ndarray:
        """Red/NIR see-saw factor delta: NIR scales by 1+delta, RED by 1-delta."""
        idx = self.material_index_at(x)
        amp = self._per_material("ndvi_tilt")[idx]
        slow = value_noise(x, y, DRIFT_CELL_M, self._salt + 51)
        fine = value_noise(x, y, 0.05, self._salt + 52)
        return amp * (0.8 * slow + 0.2 * fine)

    def red_nir_at(self, x, y):
        idx = self.material_index_at(x)
        red0 = np.array([m.reflectance_at(670.0) for m in self.materials])[idx]
        nir0 = np.array([m.reflectance_at(800.0) for m in self.materials])[idx]
        delta = self.tilt_at(x, y)
        return red0 * (1.0 - delta), nir0 * (1.0 + delta)

    def spectrum_values_at(self, x, y, bands) -> np.ndarray:
        """(N, nbands) reflectance with the tilt drift applied."""
        bands = np.asarray(bands, dtype=float)
        idx = self.material_index_at(x)
        table = np.array([m.reflectance_at(bands) for m in self.materials])
        base = table[idx]
        shape = np.where(bands >= 735.0, 1.0, -1.0)
        delta = self.tilt_at(x, y)
        return np.maximum(base * (1.0 + delta[:, None] * shape[None, :]), 0.0)

    # -- vehicle and IMU ----------------------------------------------------

    def vehicle_pose(self, t) -> RigidTransform:
        return RigidTransform(UnitQuaternion.identity(), Vec3(self.spec.speed * float(t), 0.0, 0.0))

    def left_cam_pose(self, t) -> RigidTransform:
        return compose(self.vehicle_pose(t), self.calibration.t_vehicle_left)

    def imu_orientation(self, t) -> UnitQuaternion:
        qa = UnitQuaternion.from_axis_angle((1.0, 0.0, 0.0), 0.02 * math.sin(2 * math.pi * 0.37 * t))
        qb = UnitQuaternion.from_axis_angle((0.0, 1.0, 0.0), 0.015 * math.sin(2 * math.pi * 0.23 * t + 1.0))
        return qa * qb

    def accel_stream(self):
        """(times, dynamic z accelerations) on the IMU clock.

        Sample pairs carry exactly two units of mean-square energy
        (sqrt(2) cos/sin of a random phase), so the RMS of any window of
        ~50 samples sits within a few percent of the material target by
        construction instead of wandering with the 1/sqrt(2M) spread of
        plain white noise.
        """
        if self._accel_cache is not None:
            return self._accel_cache
        rate = self.spec.rates.imu
        n = int(math.floor(self.duration * rate)) + 1
        ts = np.arange(n) / rate
        rng = np.random.default_rng(self.seed + 1)
        az = np.empty(n)
        seg_idx = self.material_index_at(self.spec.speed * ts)
        targets = self._per_material("rms_az_target")
        for s in np.unique(seg_idx):
            m = seg_idx == s
            cnt = int(m.sum())
            pairs = cnt // 2
            theta = rng.uniform(0.0, 2.0 * math.pi, pairs)
            seg = np.empty(cnt)
            seg[0:2 * pairs:2] = math.sqrt(2.0) * np.cos(theta)
            seg[1:2 * pairs:2] = math.sqrt(2.0) * np.sin(theta)
            if cnt % 2:
                seg[-1] = rng.choice([-1.0, 1.0])
            az[m] = targets[s] * seg
        self._accel_cache = (ts, az)
        return self._accel_cache

    def imu_samples(self) -> list:
        """Full sensor-frame IMU stream; gravity compensation recovers the
        generated dynamic accelerations exactly."""
        if self._imu_cache is not None:
            return self._imu_cache
        ts, az = self.accel_stream()
        rng = np.random.default_rng(self.seed + 2)
        lateral = rng.standard_normal((ts.size, 2)) * (0.3 * az.std() if az.size else 0.0)
        samples = []
        for i, t in enumerate(ts):
            q = self.imu_orientation(t)
            a_dyn = Vec3(lateral[i, 0], lateral[i, 1], az[i])
            a_earth = a_dyn + GRAVITY
            a_sensor = quat_rotate(q.conjugate(), a_earth)
            samples.append(ImuSample(float(t), a_sensor, q))
        self._imu_cache = samples
        return samples

    # -- landmarks -----------------------------------------------------------

    def _make_landmarks(self, rng) -> np.ndarray:
        n = max(60, int(30 * self.total_length))
        x = rng.uniform(-1.0, self.total_length + 4.0, n)
        y = rng.uniform(-2.5, 2.5, n)
        z = rng.uniform(0.0, 0.4, n)
        return np.column_stack([x, y, z])

    def landmarks_in_frame(self, t) -> dict:
        """Visible landmarks at time t: id -> (u, v, p_cam)."""
        cam_pose = self.left_cam_pose(t)
        t_cam_world = invert(cam_pose)
        p_cam = self._landmarks @ t_cam_world.rotation.rotation_matrix().T + \
            t_cam_world.translation.as_array()
        uv, _, in_bounds = project_points(self.calibration.left_cam, p_cam)
        ok = in_bounds & (p_cam[:, 2] > 0.2)
        return {int(i): (float(uv[i, 0]), float(uv[i, 1]), p_cam[i].copy())
                for i in np.nonzero(ok)[0]}


def generate_world(spec: WorldSpec, seed: int) -> World:
    """Validate the spec and realise a deterministic world."""
    return World(spec, seed)


# ---------------------------------------------------------------------------
# Rendering


@dataclass(frozen=True)
class FrameSidecar:
    """Per-frame ground truth: material id per left pixel, landmark hits."""

    material_ids: np.ndarray
    landmarks: dict


def _raycast(world: World, cam: PinholeCamera, pose: RigidTransform, us, vs):
    """Intersect pixel rays with the (gently bumpy) ground and obstacles.

    Returns world hit coordinates (x, y), material indices, and a hit mask.
    """
    xn = (np.asarray(us, dtype=float) - cam.cx) / cam.fx
    yn = (np.asarray(vs, dtype=float) - cam.cy) / cam.fy
    dirs = np.stack([xn, yn, np.ones_like(xn)], axis=-1)
    r = pose.rotation.rotation_matrix()
    d_world = dirs @ r.T
    o = pose.translation.as_array()
    dz = d_world[..., 2]
    hit = dz < -1e-9
    with np.errstate(divide="ignore", invalid="ignore"):
        tt = np.where(hit, (0.0 - o[2]) / dz, np.nan)
        for _ in range(3):
            x = o[0] + tt * d_world[..., 0]
            y = o[1] + tt * d_world[..., 1]
            hz = world.height_at(np.nan_to_num(x), np.nan_to_num(y))
            tt = np.where(hit, (hz - o[2]) / dz, np.nan)
    x = o[0] + tt * d_world[..., 0]
    y = o[1] + tt * d_world[..., 1]
    mat = world.material_index_at(np.nan_to_num(x))

    # Obstructing boxes override the ground hit where closer.
    for box, mat_idx in zip(world.spec.obstacles, world._box_material_idx):
        lo = np.array([box.cx - box.half_x, box.cy - box.half_y, 0.0])
        hi = np.array([box.cx + box.half_x, box.cy + box.half_y, box.height])
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d_world
            t0 = (lo - o) * inv
            t1 = (hi - o) * inv
        tmin = np.minimum(t0, t1).max(axis=-1)
        tmax = np.maximum(t0, t1).min(axis=-1)
        box_hit = (tmax >= tmin) & (tmin > 1e-6)
        closer = box_hit & (~hit | (tmin < np.nan_to_num(tt, nan=np.inf)))
        if not np.any(closer):
            continue
        bx = o[0] + tmin * d_world[..., 0]
        by = o[1] + tmin * d_world[..., 1]
        bz = o[2] + tmin * d_world[..., 2]
        x = np.where(closer, bx, x)
        # Texture coordinates wrap height onto the face.
        y = np.where(closer, by + 7.0 * bz, y)
        mat = np.where(closer, mat_idx, mat)
        hit = hit | closer
    return x, y, mat, hit


def _quantize8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(values), 0, 255).astype(np.uint8)


def _render_color(world: World, cam: PinholeCamera, pose: RigidTransform) -> ImageBuffer:
    us, vs = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
    x, y, mat, hit = _raycast(world, cam, pose, us, vs)
    rgb = world.color_at(np.nan_to_num(x).ravel(), np.nan_to_num(y).ravel(),
                         material_idx=mat.ravel())
    rgb = rgb.reshape(cam.height, cam.width, 3)
    rgb[~hit] = (30.0, 40.0, 70.0)  # sky
    return ImageBuffer(cam.width, cam.height, 3, 8, _quantize8(rgb))


def _render_thermal(world: World, cam: PinholeCamera, pose: RigidTransform) -> ImageBuffer:
    us, vs = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
    x, y, mat, hit = _raycast(world, cam, pose, us, vs)
    idx = mat.ravel()
    base = world._per_material("thermal_counts")[idx]
    drift = world._per_material("thermal_drift")[idx] * \
        value_noise(np.nan_to_num(x).ravel(), np.nan_to_num(y).ravel(), DRIFT_CELL_M, world._salt + 41)
    fine = world._per_material("thermal_noise")[idx] * \
        value_noise(np.nan_to_num(x).ravel(), np.nan_to_num(y).ravel(), 0.03, world._salt + 42)
    counts = (base + drift + fine).reshape(cam.height, cam.width)
    counts[~hit] = 4000.0  # cold sky
    return ImageBuffer(cam.width, cam.height, 1, 16,
                       np.clip(np.rint(counts), 0, 65535).astype(np.uint16))


def _render_visnir(world: World, t: float) -> VisNirLine:
    calib = world.calibration
    cam = calib.left_cam
    spec = world.spec
    ncols = spec.visnir_cols
    cols = np.arange(ncols)
    u = (cols + 0.5) * cam.width / ncols
    v = calib.scanline.v_at(u)
    pose = world.left_cam_pose(t)
    x, y, _, hit = _raycast(world, cam, pose, u, v)
    bands = calib.scanline.band_centers
    values = world.spectrum_values_at(np.nan_to_num(x), np.nan_to_num(y), bands)
    values[~hit] = 0.0
    return VisNirLine(values.astype(np.float32), bands)


def render_frame(world: World, t: float):
    """Render one synchronized observation at time t.

    Returns (FrameBundle, FrameSidecar): left/right color images, thermal
    image, VIS-NIR line, the IMU slice covering one stereo period, the
    exact vehicle pose, plus per-pixel material ids and landmark hits.
    """
    if not (0.0 <= t <= world.duration + 1e-9):
        raise InvalidArgumentError(f"t={t} outside trajectory duration [0, {world.duration:.3f}]")
    calib = world.calibration
    left_pose = world.left_cam_pose(t)
    right_pose = compose(left_pose, invert(calib.t_right_left))
    thermal_pose = compose(left_pose, calib.t_left_thermal)
    left = _render_color(world, calib.left_cam, left_pose)
    right = _render_color(world, calib.right_cam, right_pose)
    thermal = _render_thermal(world, calib.thermal_cam, thermal_pose)
    visnir = _render_visnir(world, t)
    dt = 1.0 / world.spec.rates.stereo
    imu_slice = [s for s in world.imu_samples() if t <= s.t < t + dt]
    us, vs = np.meshgrid(np.arange(calib.left_cam.width), np.arange(calib.left_cam.height))
    _, _, mat, _ = _raycast(world, calib.left_cam, left_pose, us, vs)
    sidecar = FrameSidecar(material_ids=mat.astype(np.int16),
                           landmarks=world.landmarks_in_frame(t))
    bundle = FrameBundle(
        t=t, index=int(round(t * world.spec.rates.stereo)),
        left=left, right=right, thermal=thermal, visnir=visnir,
        imu_slice=imu_slice, pose=world.vehicle_pose(t),
    )
    return bundle, sidecar


# ---------------------------------------------------------------------------
# Dataset writing


def _stream_times(duration: float, rate: float) -> np.ndarray:
    if rate <= 0:
        return np.empty(0)
    n = int(math.floor(duration * rate)) + 1
    ts = np.arange(n) / rate
    return ts[ts <= duration + 1e-12]


_G17 = "%.17g"


def generate_dataset(world: World, out_dir, rates: SensorRates | None = None) -> dict:
    """Write a ``terrafuse-dataset/1`` directory plus ground-truth sidecars
    (gt_poses.csv, gt_materials.csv, gt_landmarks.csv). Byte-identical for
    identical (spec, seed). Returns the stream counts."""
    spec = world.spec
    rates = rates or spec.rates
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "visnir").mkdir(exist_ok=True)
    calib = world.calibration
    save_calibration(calib, root / "calib.json")

    records = []  # (t, order, json line)

    stereo_times = _stream_times(world.duration, rates.stereo)
    landmark_rows = []
    material_rows = []
    pose_rows = []
    for i, t in enumerate(stereo_times):
        left_pose = world.left_cam_pose(t)
        right_pose = compose(left_pose, invert(calib.t_right_left))
        left = _render_color(world, calib.left_cam, left_pose)
        right = _render_color(world, calib.right_cam, right_pose)
        lpath = f"images/stereo_{i:06d}_l.ppm"
        rpath = f"images/stereo_{i:06d}_r.ppm"
        write_ppm(left, root / lpath)
        write_ppm(right, root / rpath)
        records.append((t, 0, json.dumps(
            {"sensor": "stereo", "t": t, "left": lpath, "right": rpath}, sort_keys=True)))
        pose = world.vehicle_pose(t)
        q = pose.rotation
        tr = pose.translation
        records.append((t, 4, json.dumps(
            {"sensor": "pose", "t": t, "quat": [q.w, q.x, q.y, q.z],
             "trans": [tr.x, tr.y, tr.z]}, sort_keys=True)))
        pose_rows.append((t, q, tr))
        material_rows.append((t, str(world.material_at(world.spec.speed * t))))
        for lid, (u, v, p_cam) in sorted(world.landmarks_in_frame(t).items()):
            landmark_rows.append(
                f"{i},{lid},{_G17 % u},{_G17 % v},"
                f"{_G17 % p_cam[0]},{_G17 % p_cam[1]},{_G17 % p_cam[2]}"
            )

    thermal_times = _stream_times(world.duration, rates.thermal)
    for i, t in enumerate(thermal_times):
        pose = compose(world.left_cam_pose(t), calib.t_left_thermal)
        img = _render_thermal(world, calib.thermal_cam, pose)
        path = f"images/thermal_{i:06d}.pgm"
        write_pgm16(img, root / path)
        records.append((t, 1, json.dumps(
            {"sensor": "thermal", "t": t, "path": path}, sort_keys=True)))

    visnir_times = _stream_times(world.duration, rates.visnir)
    for i, t in enumerate(visnir_times):
        line = _render_visnir(world, t)
        path = f"visnir/line_{i:06d}.bin"
        write_visnir_line(line, root / path)
        records.append((t, 2, json.dumps(
            {"sensor": "visnir", "t": t, "path": path}, sort_keys=True)))

    imu_times = _stream_times(world.duration, rates.imu)
    imu_by_t = {s.t: s for s in world.imu_samples()}
    for t in imu_times:
        s = imu_by_t.get(float(t))
        if s is None:
            continue
        records.append((t, 3, json.dumps(
            {"sensor": "imu", "t": float(t),
             "accel": [s.accel.x, s.accel.y, s.accel.z],
             "quat": [s.orientation.w, s.orientation.x, s.orientation.y, s.orientation.z]},
            sort_keys=True)))

    records.sort(key=lambda r: (r[0], r[1]))
    with open(root / "manifest.jsonl", "w") as f:
        for _, _, line in records:
            f.write(line + "\n")

    counts = {
        "stereo": int(stereo_times.size),
        "thermal": int(thermal_times.size),
        "visnir": int(visnir_times.size),
        "imu": int(imu_times.size),
        "pose": int(stereo_times.size),
    }
    meta = {
        "format": "terrafuse-dataset/1",
        "counts": counts,
        "duration": world.duration,
        "seed": world.seed,
        "speed": spec.speed,
    }
    (root / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    with open(root / "gt_poses.csv", "w") as f:
        f.write("t,qw,qx,qy,qz,tx,ty,tz\n")
        for t, q, tr in pose_rows:
            f.write(f"{_G17 % t},{_G17 % q.w},{_G17 % q.x},{_G17 % q.y},{_G17 % q.z},"
                    f"{_G17 % tr.x},{_G17 % tr.y},{_G17 % tr.z}\n")
    with open(root / "gt_materials.csv", "w") as f:
        f.write("t,material\n")
        for t, name in material_rows:
            f.write(f"{_G17 % t},{name}\n")
    with open(root / "gt_landmarks.csv", "w") as f:
        f.write("frame,landmark,u,v,x,y,z\n")
        for row in landmark_rows:
            f.write(row + "\n")
    return counts


# ---------------------------------------------------------------------------
# Direct per-patch feature synthesis (fast oracle path)


def feature_stream(world: World, seed: int, frames_per_patch: int = 4,
                   points_per_patch: int = 350,
                   footprint: Footprint = Footprint()):
    """Per-patch feature vectors sampled directly from the material model.

    Follows the same patch timing and footprint geometry as the full
    mapping pipeline but samples surface points analytically instead of
    rendering and reconstructing, so long multi-seed runs stay cheap.
    Returns a list of (t_mid, FeatureVector).
    """
    stereo_times = _stream_times(world.duration, world.spec.rates.stereo)
    rng = np.random.default_rng(seed + 7919)
    imu = world.imu_samples()
    rows = []
    start = 0
    n = stereo_times.size
    while start + frames_per_patch <= n:
        t_first = float(stereo_times[start])
        t_last = float(stereo_times[start + frames_per_patch - 1])
        t_mid = 0.5 * (t_first + t_last)
        x_mid = world.spec.speed * t_mid
        xs = x_mid + rng.uniform(-footprint.length / 2, footprint.length / 2, points_per_patch)
        ys = rng.uniform(-footprint.width / 2, footprint.width / 2, points_per_patch)
        colors = _quantize8(world.color_at(xs, ys))
        thermal = world.thermal_at(xs, ys)
        red, nir = world.red_nir_at(xs, ys)
        with np.errstate(divide="ignore", invalid="ignore"):
            ndvi = np.where(nir + red != 0, (nir - red) / (nir + red), np.nan)
        zs = world.height_at(xs, ys)
        patch = GroundPatch(
            t_mid=t_mid, t_start=t_first, t_end=t_last, footprint=footprint,
            frames_stitched=frames_per_patch,
            positions=np.column_stack([xs, ys, zs]),
            colors=colors, thermal=thermal, ndvi=ndvi,
        )
        try:
            window = window_for_interval(imu, t_first, t_last)
        except EmptyWindowError:
            window = None
        rows.append((t_mid, patch_features(patch, window)))
        start += frames_per_patch
    return rows


# ---------------------------------------------------------------------------
# Presets


def preset_world(name: str) -> WorldSpec:
    """Named world specs used by the CLI."""
    if name == "grass-paved":
        return WorldSpec(segments=(Segment("grass", 8.0), Segment("paved", 8.0)))
    if name == "three-surface":
        return WorldSpec(segments=(Segment("grass", 8.0), Segment("ploughed", 8.0),
                                   Segment("paved", 8.0)))
    if name == "grass":
        return WorldSpec(segments=(Segment("grass", 10.0),))
    if name == "paved":
        return WorldSpec(segments=(Segment("paved", 10.0),))
    if name == "ploughed":
        return WorldSpec(segments=(Segment("ploughed", 10.0),))
    raise InvalidArgumentError(f"unknown world preset {name!r}")
