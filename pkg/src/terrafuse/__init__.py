"""terrafuse: multi-sensor terrain mapping and ground-change detection.

Fuses stereo, thermal, VIS-NIR and inertial logs into a multi-layer 3D
ground map, extracts per-patch statistical terrain features, and flags
ground-type changes with a CUSUM test. Ships a synthetic rover-dataset
generator that doubles as the verification oracle.
"""

__version__ = "0.1.0"

from .geomcore import (  # noqa: F401
    PinholeCamera,
    RigidTransform,
    UnitQuaternion,
    Vec3,
    compose,
    invert,
    project,
    quat_rotate,
)
