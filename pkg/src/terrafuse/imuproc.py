"""Gravity compensation of accelerometer streams and windowed vibration features."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyWindowError, InvalidArgumentError
from .geomcore import UnitQuaternion, Vec3, quat_rotate

#: Gravity in the Earth frame, m/s^2. Fixed constant; callers that need a
#: different value pass it explicitly.
GRAVITY = Vec3(0.0, 0.0, -9.81)


@dataclass(frozen=True)
class ImuSample:
    """One accelerometer reading with the sensor-to-Earth orientation."""

    t: float
    accel: Vec3
    orientation: UnitQuaternion

    def __post_init__(self):
        if not math.isfinite(self.t):
            raise InvalidArgumentError(f"sample timestamp must be finite, got {self.t}")


@dataclass(frozen=True)
class AccelWindow:
    """Earth-frame dynamic vertical accelerations inside [t_start, t_end)."""

    t_start: float
    t_end: float
    samples: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise InvalidArgumentError(f"window requires t_start < t_end, got [{self.t_start}, {self.t_end})")
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=float))

    def __len__(self) -> int:
        return self.samples.size


def gravity_compensate(sample: ImuSample, gravity: Vec3 = GRAVITY) -> Vec3:
    """Earth-frame dynamic acceleration: rotate the reading into the Earth
    frame with the sample orientation, then subtract gravity."""
    a_earth = quat_rotate(sample.orientation, sample.accel)
    return a_earth - gravity


def rms(window: AccelWindow) -> float:
    """Root mean square of the window samples."""
    if len(window) == 0:
        raise EmptyWindowError(f"no samples in window [{window.t_start}, {window.t_end})")
    return float(np.sqrt(np.mean(np.square(window.samples))))


def window_for_interval(stream, t0: float, t1: float, gravity: Vec3 = GRAVITY) -> AccelWindow:
    """Collect Earth-frame dynamic z accelerations for samples with
    t0 <= t < t1, preserving stream order."""
    if not t0 < t1:
        raise InvalidArgumentError(f"interval requires t0 < t1, got [{t0}, {t1})")
    zs = [gravity_compensate(s, gravity).z for s in stream if t0 <= s.t < t1]
    if not zs:
        raise EmptyWindowError(f"no samples in interval [{t0}, {t1})")
    return AccelWindow(t0, t1, np.array(zs, dtype=float))
