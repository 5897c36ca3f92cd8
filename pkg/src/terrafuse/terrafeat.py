"""Ground-patch segmentation under the chassis footprint and the
21-dimensional per-patch feature vector: four statistical moments of each
c1c2c3 color channel (12), of the thermal layer (4) and of the NDVI layer
(4), plus the RMS of vertical acceleration (1).

Moments use the population convention (divide by N). A group whose data is
missing or has (near) zero variance is flagged degenerate; downstream
change detection skips flagged groups rather than ingesting zeros.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import EmptyPatchError, EmptyTrajectoryError, InvalidArgumentError
from .fusionmap import MultiLayerMap
from .imuproc import AccelWindow, rms
from .motion import Trajectory, pose_at
from .geomcore import invert

DEGENERATE_VARIANCE = 1e-12

FEATURE_COLUMNS = [
    "c1_mean", "c1_var", "c1_skew", "c1_kurt",
    "c2_mean", "c2_var", "c2_skew", "c2_kurt",
    "c3_mean", "c3_var", "c3_skew", "c3_kurt",
    "therm_mean", "therm_var", "therm_skew", "therm_kurt",
    "ndvi_mean", "ndvi_var", "ndvi_skew", "ndvi_kurt",
    "rms_az",
]

FLAG_COLUMNS = ["deg_color", "deg_thermal", "deg_ndvi", "deg_rms"]

#: feature column -> degenerate-flag group
COLUMN_GROUP = {name: "color" for name in FEATURE_COLUMNS[:12]}
COLUMN_GROUP.update({name: "thermal" for name in FEATURE_COLUMNS[12:16]})
COLUMN_GROUP.update({name: "ndvi" for name in FEATURE_COLUMNS[16:20]})
COLUMN_GROUP["rms_az"] = "rms"


@dataclass(frozen=True)
class Footprint:
    """Chassis-footprint rectangle in the vehicle frame, centered on the
    vehicle origin: x (forward) spans +/- length/2, y (left) +/- width/2."""

    length: float = 0.85
    width: float = 0.70

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise InvalidArgumentError("footprint must have positive area")

    def contains(self, xy: np.ndarray) -> np.ndarray:
        x = xy[:, 0]
        y = xy[:, 1]
        return (np.abs(x) <= self.length / 2.0) & (np.abs(y) <= self.width / 2.0)


@dataclass(frozen=True)
class GroundPatch:
    """Map points under the footprint for one stitched frame group."""

    t_mid: float
    t_start: float
    t_end: float
    footprint: Footprint
    frames_stitched: int
    positions: np.ndarray
    colors: np.ndarray
    thermal: np.ndarray
    ndvi: np.ndarray

    def __len__(self) -> int:
        return self.positions.shape[0]


class MomentSet(NamedTuple):
    mean: float
    variance: float
    skewness: float
    kurtosis: float
    degenerate: bool


class GroupFlags(NamedTuple):
    color: bool
    thermal: bool
    ndvi: bool
    rms: bool


@dataclass(frozen=True)
class FeatureVector:
    """21 per-patch features plus per-group degenerate flags."""

    t_mid: float
    color: np.ndarray    # (12,)
    thermal: np.ndarray  # (4,)
    ndvi: np.ndarray     # (4,)
    rms_az: float
    flags: GroupFlags

    def values(self) -> np.ndarray:
        return np.concatenate([self.color, self.thermal, self.ndvi, [self.rms_az]])

    def as_dict(self) -> dict:
        d = dict(zip(FEATURE_COLUMNS, self.values()))
        d["deg_color"] = self.flags.color
        d["deg_thermal"] = self.flags.thermal
        d["deg_ndvi"] = self.flags.ndvi
        d["deg_rms"] = self.flags.rms
        return d


def c1c2c3(r, g, b):
    """Illumination-robust color coordinates:
    c1 = atan(R / max(G, B)), c2 = atan(G / max(R, B)), c3 = atan(B / max(R, G)).

    When the denominator is zero the arctangent limit is used: pi/2 for a
    positive numerator, 0 when numerator and denominator are both zero.
    """
    r = np.asarray(r, dtype=float)
    g = np.asarray(g, dtype=float)
    b = np.asarray(b, dtype=float)

    def channel(num, den):
        safe = np.where(den > 0, den, 1.0)
        out = np.arctan(num / safe)
        return np.where(den > 0, out, np.where(num > 0, math.pi / 2.0, 0.0))

    return (
        channel(r, np.maximum(g, b)),
        channel(g, np.maximum(r, b)),
        channel(b, np.maximum(r, g)),
    )


def moments(values) -> MomentSet:
    """Population mean, variance, skewness and kurtosis.

    Skewness and kurtosis are forced to 0 (and the set flagged degenerate)
    when the variance falls below 1e-12.
    """
    x = np.asarray(values, dtype=float).reshape(-1)
    if x.size == 0:
        raise InvalidArgumentError("moments of an empty list are undefined")
    mean = float(x.mean())
    d = x - mean
    var = float(np.mean(d * d))
    if var < DEGENERATE_VARIANCE:
        return MomentSet(mean, var, 0.0, 0.0, True)
    sigma = math.sqrt(var)
    skew = float(np.mean(d**3) / sigma**3)
    kurt = float(np.mean(d**4) / sigma**4)
    return MomentSet(mean, var, skew, kurt, False)


def segment_patches(m: MultiLayerMap, trajectory: Trajectory, frame_times,
                    footprint: Footprint = Footprint(), frames_per_patch: int = 4,
                    stride: int | None = None) -> list[GroundPatch]:
    """Group consecutive frames and keep the map points that fall inside
    the footprint at each group's mid time.

    Groups are non-overlapping by default; a smaller stride yields
    overlapping patches.
    """
    if frames_per_patch < 1:
        raise InvalidArgumentError(f"frames_per_patch must be >= 1, got {frames_per_patch}")
    if len(trajectory) == 0:
        raise EmptyTrajectoryError("patch segmentation needs a trajectory")
    if stride is None:
        stride = frames_per_patch
    if stride < 1:
        raise InvalidArgumentError(f"stride must be >= 1, got {stride}")
    times = np.asarray(frame_times, dtype=float)
    n = times.size
    patches = []
    start = 0
    while start + frames_per_patch <= n:
        t_first = float(times[start])
        t_last = float(times[start + frames_per_patch - 1])
        t_mid = 0.5 * (t_first + t_last)
        pose, _ = pose_at(trajectory, t_mid)
        t_vehicle_world = invert(pose)
        local = m.positions @ t_vehicle_world.rotation.rotation_matrix().T + \
            t_vehicle_world.translation.as_array()
        mask = footprint.contains(local[:, :2])
        patches.append(GroundPatch(
            t_mid=t_mid,
            t_start=t_first,
            t_end=t_last,
            footprint=footprint,
            frames_stitched=frames_per_patch,
            positions=m.positions[mask],
            colors=m.colors[mask],
            thermal=m.thermal[mask],
            ndvi=m.ndvi[mask],
        ))
        start += stride
    return patches


def _group_moments(values: np.ndarray) -> tuple[np.ndarray, bool]:
    """Moments of a layer; (NaN vector, degenerate=True) when no data."""
    present = values[np.isfinite(values)]
    if present.size == 0:
        return np.full(4, np.nan), True
    ms = moments(present)
    return np.array([ms.mean, ms.variance, ms.skewness, ms.kurtosis]), ms.degenerate


def patch_features(patch: GroundPatch, accel: AccelWindow | None) -> FeatureVector:
    """Feature vector of one patch: c1c2c3 color moments, thermal moments,
    NDVI moments and the RMS of the accompanying acceleration window."""
    if len(patch) == 0:
        raise EmptyPatchError(f"patch at t_mid={patch.t_mid} has no points")
    cols = patch.colors.astype(float)
    c1, c2, c3 = c1c2c3(cols[:, 0], cols[:, 1], cols[:, 2])
    color_parts = []
    color_degenerate = True
    for chan in (c1, c2, c3):
        ms = moments(chan)
        color_parts.append([ms.mean, ms.variance, ms.skewness, ms.kurtosis])
        color_degenerate &= ms.degenerate
    thermal_m, thermal_deg = _group_moments(patch.thermal)
    ndvi_m, ndvi_deg = _group_moments(patch.ndvi)
    if accel is not None and len(accel) > 0:
        rms_az = rms(accel)
        rms_deg = False
    else:
        rms_az = float("nan")
        rms_deg = True
    return FeatureVector(
        t_mid=patch.t_mid,
        color=np.concatenate(color_parts),
        thermal=thermal_m,
        ndvi=ndvi_m,
        rms_az=rms_az,
        flags=GroupFlags(color_degenerate, thermal_deg, ndvi_deg, rms_deg),
    )
