"""On-disk dataset layout (``terrafuse-dataset/1``), timestamp-based frame
bundling, and result exports (ASCII PLY maps, feature/event CSVs).

Dataset directory layout::

    manifest.jsonl   one JSON record per observation, fields: sensor, t,
                     plus payload paths ("left"/"right" for stereo, "path"
                     for thermal and visnir) or inline values ("accel" +
                     "quat" for imu, "quat" + "trans" for pose)
    calib.json       terrafuse-calib/1 document
    dataset.json     format tag, per-stream record counts
    images/          stereo PPM (8-bit, P6) and thermal PGM (16-bit, P5)
    visnir/          scan lines, binary: uint32 ncols, uint32 nbands,
                     float64 band centers, float32 values (column-major by
                     scan column)

Timestamps are seconds relative to dataset start, strictly increasing per
stream.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calib import CalibrationSet, load_calibration
from .errors import (
    DatasetFormatError,
    InvalidArgumentError,
    MissingManifestError,
    MissingPayloadError,
)
from .fusionmap import MultiLayerMap, VisNirLine
from .geomcore import RigidTransform, UnitQuaternion, Vec3
from .imuproc import ImuSample
from .motion import Trajectory, pose_at
from .stereo import ImageBuffer
from .terrafeat import FEATURE_COLUMNS, FLAG_COLUMNS, FeatureVector, GroupFlags

DATASET_FORMAT = "terrafuse-dataset/1"
SENSOR_NAMES = ("stereo", "thermal", "visnir", "imu", "pose")


# ---------------------------------------------------------------------------
# Image payloads


def write_ppm(img: ImageBuffer, path) -> None:
    if img.channels != 3 or img.bit_depth != 8:
        raise InvalidArgumentError("PPM writer expects an 8-bit color image")
    with open(path, "wb") as f:
        f.write(f"P6\n{img.width} {img.height}\n255\n".encode())
        f.write(img.pixels.tobytes())


def read_ppm(path) -> ImageBuffer:
    data = Path(path).read_bytes()
    magic, width, height, maxval, pixels = _parse_netpbm(data, path)
    if magic != b"P6" or maxval != 255:
        raise DatasetFormatError(f"{path}: expected binary 8-bit PPM")
    arr = np.frombuffer(pixels, dtype=np.uint8, count=width * height * 3)
    return ImageBuffer(width, height, 3, 8, arr.reshape(height, width, 3).copy())


def write_pgm16(img: ImageBuffer, path) -> None:
    if img.channels != 1 or img.bit_depth != 16:
        raise InvalidArgumentError("PGM16 writer expects a 16-bit single-channel image")
    with open(path, "wb") as f:
        f.write(f"P5\n{img.width} {img.height}\n65535\n".encode())
        f.write(img.pixels.astype(">u2").tobytes())


def read_pgm16(path) -> ImageBuffer:
    data = Path(path).read_bytes()
    magic, width, height, maxval, pixels = _parse_netpbm(data, path)
    if magic != b"P5" or maxval != 65535:
        raise DatasetFormatError(f"{path}: expected binary 16-bit PGM")
    arr = np.frombuffer(pixels, dtype=">u2", count=width * height)
    return ImageBuffer(width, height, 1, 16, arr.reshape(height, width).astype(np.uint16))


def _parse_netpbm(data: bytes, path):
    try:
        fields = []
        pos = 0
        while len(fields) < 4:
            # token scanner; netpbm comments start with '#'
            while pos < len(data) and data[pos:pos + 1].isspace():
                pos += 1
            if data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos:pos + 1] != b"\n":
                    pos += 1
                continue
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace():
                pos += 1
            fields.append(data[start:pos])
        pos += 1  # single whitespace after maxval
        magic = fields[0]
        width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
        return magic, width, height, maxval, data[pos:]
    except (ValueError, IndexError) as exc:
        raise DatasetFormatError(f"{path}: not a netpbm image ({exc})") from exc


def write_visnir_line(line: VisNirLine, path) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<II", line.ncols, line.band_centers.size))
        f.write(np.asarray(line.band_centers, dtype="<f8").tobytes())
        f.write(np.asarray(line.values, dtype="<f4").tobytes())


def read_visnir_line(path) -> VisNirLine:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise DatasetFormatError(f"{path}: truncated visnir line")
    ncols, nbands = struct.unpack_from("<II", data, 0)
    need = 8 + 8 * nbands + 4 * ncols * nbands
    if len(data) != need:
        raise DatasetFormatError(f"{path}: visnir payload is {len(data)} bytes, expected {need}")
    centers = np.frombuffer(data, dtype="<f8", count=nbands, offset=8)
    values = np.frombuffer(data, dtype="<f4", count=ncols * nbands, offset=8 + 8 * nbands)
    return VisNirLine(values.reshape(ncols, nbands).copy(), centers.copy())


# ---------------------------------------------------------------------------
# Sensor log


@dataclass(frozen=True)
class SensorRecord:
    sensor: str
    t: float
    payload: dict


@dataclass
class SensorLog:
    """Parsed dataset: per-stream records plus calibration; image payloads
    stay on disk and are loaded per bundle."""

    root: Path
    streams: dict
    calib: CalibrationSet
    imu: list = field(default_factory=list)

    def stereo_times(self) -> np.ndarray:
        return np.array([r.t for r in self.streams.get("stereo", [])])

    def trajectory(self) -> Trajectory | None:
        poses = self.streams.get("pose", [])
        if not poses:
            return None
        times = [r.t for r in poses]
        quats = np.array([r.payload["quat"] for r in poses], dtype=float)
        trans = np.array([r.payload["trans"] for r in poses], dtype=float)
        return Trajectory(np.array(times), quats, trans)


def load_dataset(root) -> SensorLog:
    """Parse and validate a dataset directory.

    Checks per-stream timestamp monotonicity and that every payload path
    resolves; raises descriptive errors naming the offending record.
    """
    root = Path(root)
    manifest = root / "manifest.jsonl"
    if not manifest.is_file():
        raise MissingManifestError(f"no manifest.jsonl in {root}")
    calib_path = root / "calib.json"
    if not calib_path.is_file():
        raise DatasetFormatError(f"no calib.json in {root}")
    calib = load_calibration(calib_path)

    streams: dict = {name: [] for name in SENSOR_NAMES}
    imu_samples: list[ImuSample] = []
    with open(manifest) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{manifest}:{lineno}: invalid JSON ({exc})") from exc
            sensor = rec.get("sensor")
            if sensor not in SENSOR_NAMES:
                raise DatasetFormatError(f"{manifest}:{lineno}: unknown sensor {sensor!r}")
            t = rec.get("t")
            if not isinstance(t, (int, float)) or not math.isfinite(t):
                raise DatasetFormatError(f"{manifest}:{lineno}: bad timestamp {t!r}")
            stream = streams[sensor]
            if stream and t <= stream[-1].t:
                raise DatasetFormatError(
                    f"{manifest}:{lineno}: non-monotone timestamp {t} for sensor {sensor}"
                )
            path_keys = {"stereo": ("left", "right"), "thermal": ("path",), "visnir": ("path",)}
            for key in path_keys.get(sensor, ()):
                rel = rec.get(key)
                if not rel:
                    raise DatasetFormatError(f"{manifest}:{lineno}: {sensor} record missing {key!r}")
                if not (root / rel).is_file():
                    raise MissingPayloadError(f"{manifest}:{lineno}: missing payload {root / rel}")
            if sensor == "imu":
                try:
                    ax, ay, az = (float(v) for v in rec["accel"])
                    qw, qx, qy, qz = (float(v) for v in rec["quat"])
                except (KeyError, TypeError, ValueError) as exc:
                    raise DatasetFormatError(f"{manifest}:{lineno}: bad imu record ({exc})") from exc
                imu_samples.append(ImuSample(float(t), Vec3(ax, ay, az),
                                             UnitQuaternion(qw, qx, qy, qz)))
            if sensor == "pose":
                if "quat" not in rec or "trans" not in rec:
                    raise DatasetFormatError(f"{manifest}:{lineno}: pose record missing quat/trans")
            streams[sensor].append(SensorRecord(sensor, float(t), rec))
    return SensorLog(root=root, streams=streams, calib=calib, imu=imu_samples)


@dataclass(frozen=True)
class SyncTolerances:
    """Per-sensor timestamp matching tolerances, seconds."""

    thermal: float = 0.070
    visnir: float = 0.010


@dataclass(frozen=True)
class FrameBundle:
    """One synchronized observation around a stereo frame."""

    t: float
    index: int
    left: ImageBuffer
    right: ImageBuffer
    thermal: ImageBuffer | None
    visnir: VisNirLine | None
    imu_slice: list
    pose: RigidTransform | None


def _nearest_record(records, t: float):
    if not records:
        return None, math.inf
    times = np.array([r.t for r in records])
    i = int(np.argmin(np.abs(times - t)))
    return records[i], abs(times[i] - t)


def bundle_at(log: SensorLog, t_stereo: float,
              tol: SyncTolerances = SyncTolerances()) -> FrameBundle:
    """Assemble the frame bundle for one stereo timestamp: the nearest
    thermal frame and VIS-NIR line within tolerance, the IMU samples up to
    the next stereo frame, and the interpolated pose."""
    stereo = log.streams.get("stereo", [])
    times = [r.t for r in stereo]
    try:
        idx = times.index(t_stereo)
    except ValueError:
        raise InvalidArgumentError(f"{t_stereo} is not a stereo frame timestamp") from None
    rec = stereo[idx]
    left = read_ppm(log.root / rec.payload["left"])
    right = read_ppm(log.root / rec.payload["right"])

    thermal = None
    t_rec, dt = _nearest_record(log.streams.get("thermal", []), t_stereo)
    if t_rec is not None and dt <= tol.thermal:
        thermal = read_pgm16(log.root / t_rec.payload["path"])

    visnir = None
    v_rec, dv = _nearest_record(log.streams.get("visnir", []), t_stereo)
    if v_rec is not None and dv <= tol.visnir:
        visnir = read_visnir_line(log.root / v_rec.payload["path"])

    if idx + 1 < len(times):
        t_next = times[idx + 1]
    elif len(times) >= 2:
        t_next = t_stereo + (times[-1] - times[0]) / (len(times) - 1)
    else:
        t_next = math.inf
    imu_slice = [s for s in log.imu if t_stereo <= s.t < t_next]

    pose = None
    traj = log.trajectory()
    if traj is not None:
        pose, _ = pose_at(traj, t_stereo)
    return FrameBundle(t_stereo, idx, left, right, thermal, visnir, imu_slice, pose)


# ---------------------------------------------------------------------------
# Exports

_G9 = "%.9g"


def export_ply(m: MultiLayerMap, path) -> None:
    """ASCII PLY with x y z red green blue thermal ndvi frame_id per
    vertex; absent thermal/ndvi written as nan. Values carry 9 significant
    digits, making a load/export round trip byte-stable."""
    if len(m) == 0:
        raise InvalidArgumentError("refusing to export an empty map")
    lines = [
        "ply",
        "format ascii 1.0",
        f"comment terrafuse multi-layer map cell_size={_G9 % m.cell_size}",
        f"element vertex {len(m)}",
        "property double x",
        "property double y",
        "property double z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property double thermal",
        "property double ndvi",
        "property int frame_id",
        "end_header",
    ]
    rows = []
    for i in range(len(m)):
        p = m.positions[i]
        c = m.colors[i]
        rows.append(
            f"{_G9 % p[0]} {_G9 % p[1]} {_G9 % p[2]} {c[0]} {c[1]} {c[2]} "
            f"{_G9 % m.thermal[i]} {_G9 % m.ndvi[i]} {m.frame_ids[i]}"
        )
    Path(path).write_text("\n".join(lines + rows) + "\n")


def load_ply(path) -> MultiLayerMap:
    path = Path(path)
    text = path.read_text().splitlines()
    if not text or text[0] != "ply":
        raise DatasetFormatError(f"{path}: not a PLY file")
    cell_size = 0.02
    n_vertex = None
    body_start = None
    for i, line in enumerate(text):
        if line.startswith("comment") and "cell_size=" in line:
            cell_size = float(line.split("cell_size=")[1])
        elif line.startswith("element vertex"):
            n_vertex = int(line.split()[-1])
        elif line == "end_header":
            body_start = i + 1
            break
    if n_vertex is None or body_start is None:
        raise DatasetFormatError(f"{path}: malformed PLY header")
    rows = text[body_start:body_start + n_vertex]
    if len(rows) != n_vertex:
        raise DatasetFormatError(f"{path}: expected {n_vertex} vertices, found {len(rows)}")
    data = np.array([r.split() for r in rows], dtype=object)
    pos = data[:, 0:3].astype(float)
    col = data[:, 3:6].astype(int).astype(np.uint8)
    thermal = data[:, 6].astype(float)
    ndvi = data[:, 7].astype(float)
    fid = data[:, 8].astype(int).astype(np.int32)
    return MultiLayerMap(cell_size=cell_size, positions=pos, colors=col, thermal=thermal,
                         ndvi=ndvi, spectrum_ref=np.full(n_vertex, -1, dtype=np.int64),
                         frame_ids=fid)


def export_features_csv(rows, path) -> None:
    """Feature stream CSV: t_mid, the 21 feature columns in documented
    order, then the four degenerate flags as 0/1."""
    header = ["t_mid"] + FEATURE_COLUMNS + FLAG_COLUMNS
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for fv in rows:
            d = fv.as_dict()
            row = [_G9 % fv.t_mid] + ["%.12g" % d[c] for c in FEATURE_COLUMNS]
            row += [str(int(d[c])) for c in FLAG_COLUMNS]
            w.writerow(row)


def read_features_csv(path):
    """Parse a feature CSV back into (t, FeatureVector) rows."""
    path = Path(path)
    expected = ["t_mid"] + FEATURE_COLUMNS + FLAG_COLUMNS
    out = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError(f"{path}: empty features file") from None
        if header != expected:
            raise DatasetFormatError(f"{path}: unexpected header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise DatasetFormatError(
                    f"{path}: line {lineno}: expected {len(expected)} columns, got {len(row)}"
                )
            try:
                vals = [float(v) for v in row[:22]]
                flags = [bool(int(v)) for v in row[22:]]
            except ValueError as exc:
                raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from exc
            fv = FeatureVector(
                t_mid=vals[0],
                color=np.array(vals[1:13]),
                thermal=np.array(vals[13:17]),
                ndvi=np.array(vals[17:21]),
                rms_az=vals[21],
                flags=GroupFlags(*flags),
            )
            out.append((fv.t_mid, fv))
    return out


def export_events_csv(events, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "feature_name", "s_plus", "s_minus", "h"])
        for e in events:
            w.writerow([_G9 % e.t, e.feature, "%.12g" % e.s_plus,
                        "%.12g" % e.s_minus, _G9 % e.h])


def read_events_csv(path):
    from .cusum import ChangeEvent

    out = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["t", "feature_name", "s_plus", "s_minus", "h"]:
            raise DatasetFormatError(f"{path}: unexpected events header {header!r}")
        for row in reader:
            out.append(ChangeEvent(float(row[0]), row[1], float(row[2]),
                                   float(row[3]), float(row[4])))
    return out


def read_landmarks_csv(path):
    """Ground-truth landmark tracks: frame -> {landmark_id: (u, v, xyz)}."""
    tracks: dict[int, dict[int, tuple]] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["frame", "landmark", "u", "v", "x", "y", "z"]:
            raise DatasetFormatError(f"{path}: unexpected landmarks header {header!r}")
        for row in reader:
            frame = int(row[0])
            lid = int(row[1])
            u, v = float(row[2]), float(row[3])
            xyz = np.array([float(row[4]), float(row[5]), float(row[6])])
            tracks.setdefault(frame, {})[lid] = (u, v, xyz)
    return tracks
