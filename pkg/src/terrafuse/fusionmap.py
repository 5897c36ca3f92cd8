"""Multi-layer map assembly: box-grid cloud merging plus thermal, VIS-NIR
spectrum and NDVI layer attachment.

Layer values live in parallel arrays; NaN (or -1 for spectrum references)
marks an absent layer value. During box-grid averaging a layer is averaged
only over the member points that carry it; absent stays absent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .calib import CalibrationSet, ScanLine
from .errors import InvalidArgumentError, InvalidSpectrumError, UndefinedNdviError
from .geomcore import PinholeCamera, RigidTransform, compose, invert, project_points
from .stereo import ImageBuffer, PointCloud, bilinear_sample

RED_CENTER_NM = 670.0
NIR_CENTER_NM = 800.0
BAND_WINDOW_NM = 5.0


@dataclass(frozen=True)
class Spectrum:
    """Reflectance counts on an increasing wavelength grid (nm)."""

    values: np.ndarray
    band_centers: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        centers = np.asarray(self.band_centers, dtype=float)
        if values.shape != centers.shape:
            raise InvalidArgumentError(
                f"spectrum has {values.size} values but {centers.size} band centers"
            )
        if centers.size >= 2 and np.any(np.diff(centers) <= 0):
            raise InvalidArgumentError("band centers must be strictly increasing")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "band_centers", centers)


@dataclass(frozen=True)
class VisNirLine:
    """One scan-line acquisition: spectra for each of ncols columns spread
    across the image width the line was calibrated against."""

    values: np.ndarray        # (ncols, nbands) float32/float64
    band_centers: np.ndarray  # (nbands,)

    def __post_init__(self):
        values = np.asarray(self.values)
        centers = np.asarray(self.band_centers, dtype=float)
        if values.ndim != 2 or values.shape[1] != centers.size:
            raise InvalidArgumentError(
                f"line values shape {values.shape} inconsistent with {centers.size} bands"
            )
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "band_centers", centers)

    @property
    def ncols(self) -> int:
        return int(self.values.shape[0])

    def spectrum(self, col: int) -> Spectrum:
        return Spectrum(self.values[col].astype(float), self.band_centers)


@dataclass
class MultiLayerMap:
    """World-frame point set with color, thermal, spectral and NDVI layers."""

    cell_size: float
    positions: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))
    colors: np.ndarray = field(default_factory=lambda: np.empty((0, 3), dtype=np.uint8))
    thermal: np.ndarray = field(default_factory=lambda: np.empty(0))
    ndvi: np.ndarray = field(default_factory=lambda: np.empty(0))
    spectrum_ref: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    frame_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int32))
    spectra: list = field(default_factory=list)

    def __post_init__(self):
        if self.cell_size <= 0:
            raise InvalidArgumentError(f"cell_size must be positive, got {self.cell_size}")
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
        self.thermal = np.asarray(self.thermal, dtype=float).reshape(-1)
        self.ndvi = np.asarray(self.ndvi, dtype=float).reshape(-1)
        self.spectrum_ref = np.asarray(self.spectrum_ref, dtype=np.int64).reshape(-1)
        self.frame_ids = np.asarray(self.frame_ids, dtype=np.int32).reshape(-1)
        if not np.all(np.isfinite(self.positions)):
            raise InvalidArgumentError("map positions must be finite")
        present = np.isfinite(self.ndvi)
        if np.any((self.ndvi[present] < -1) | (self.ndvi[present] > 1)):
            raise InvalidArgumentError("ndvi values must lie in [-1, 1]")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @staticmethod
    def empty(cell_size: float) -> "MultiLayerMap":
        return MultiLayerMap(cell_size=cell_size)


def merge_cloud(m: MultiLayerMap, cloud: PointCloud, t_world_cam: RigidTransform) -> MultiLayerMap:
    """Box-grid merge of a camera-frame cloud into the map.

    The cloud is moved to the world frame; inside the axis-aligned
    bounding-box intersection of map and cloud, co-cell points are
    replaced by their location/color averages (layers averaged over the
    points that carry them). Points outside the overlap are untouched.
    """
    new_pos = cloud.positions @ t_world_cam.rotation.rotation_matrix().T + \
        t_world_cam.translation.as_array()
    n_new = new_pos.shape[0]
    new_thermal = np.full(n_new, np.nan)
    new_ndvi = np.full(n_new, np.nan)
    new_ref = np.full(n_new, -1, dtype=np.int64)

    if len(m) == 0 or n_new == 0:
        return MultiLayerMap(
            cell_size=m.cell_size,
            positions=np.vstack([m.positions, new_pos]),
            colors=np.vstack([m.colors, cloud.colors]),
            thermal=np.concatenate([m.thermal, new_thermal]),
            ndvi=np.concatenate([m.ndvi, new_ndvi]),
            spectrum_ref=np.concatenate([m.spectrum_ref, new_ref]),
            frame_ids=np.concatenate([m.frame_ids, cloud.frame_ids]),
            spectra=list(m.spectra),
        )

    all_pos = np.vstack([m.positions, new_pos])
    all_col = np.vstack([m.colors, cloud.colors]).astype(float)
    all_th = np.concatenate([m.thermal, new_thermal])
    all_nd = np.concatenate([m.ndvi, new_ndvi])
    all_ref = np.concatenate([m.spectrum_ref, new_ref])
    all_fid = np.concatenate([m.frame_ids, cloud.frame_ids])

    # Overlap region on the cell grid: intersection of the cell-aligned
    # bounding boxes of the existing map and the incoming cloud.
    all_keys = np.floor(all_pos / m.cell_size).astype(np.int64)
    map_keys = all_keys[: len(m)]
    new_keys = all_keys[len(m):]
    lo = np.maximum(map_keys.min(axis=0), new_keys.min(axis=0))
    hi = np.minimum(map_keys.max(axis=0), new_keys.max(axis=0))
    if np.any(lo > hi):
        inside = np.zeros(all_pos.shape[0], dtype=bool)
    else:
        inside = np.all((all_keys >= lo) & (all_keys <= hi), axis=1)

    keep = ~inside
    out_pos = [all_pos[keep]]
    out_col = [all_col[keep]]
    out_th = [all_th[keep]]
    out_nd = [all_nd[keep]]
    out_ref = [all_ref[keep]]
    out_fid = [all_fid[keep]]

    if np.any(inside):
        pos_in = all_pos[inside]
        keys = all_keys[inside]
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        nc = uniq.shape[0]
        counts = np.bincount(inverse, minlength=nc).astype(float)
        cpos = np.empty((nc, 3))
        ccol = np.empty((nc, 3))
        for c in range(3):
            cpos[:, c] = np.bincount(inverse, weights=pos_in[:, c], minlength=nc) / counts
            ccol[:, c] = np.bincount(inverse, weights=all_col[inside][:, c], minlength=nc) / counts

        def layer_mean(values: np.ndarray) -> np.ndarray:
            ok = np.isfinite(values)
            num = np.bincount(inverse[ok], weights=values[ok], minlength=nc)
            den = np.bincount(inverse[ok], minlength=nc).astype(float)
            with np.errstate(invalid="ignore"):
                return np.where(den > 0, num / np.maximum(den, 1.0), np.nan)

        cth = layer_mean(all_th[inside])
        cnd = layer_mean(all_nd[inside])
        # First present spectrum reference (by member order) wins per cell.
        refs_in = all_ref[inside]
        cref = np.full(nc, -1, dtype=np.int64)
        has_ref = np.nonzero(refs_in >= 0)[0]
        for i in has_ref[::-1]:
            cref[inverse[i]] = refs_in[i]
        cfid = np.zeros(nc, dtype=np.int32)
        np.maximum.at(cfid, inverse, all_fid[inside])

        out_pos.append(cpos)
        out_col.append(ccol)
        out_th.append(cth)
        out_nd.append(cnd)
        out_ref.append(cref)
        out_fid.append(cfid)

    return MultiLayerMap(
        cell_size=m.cell_size,
        positions=np.vstack(out_pos),
        colors=np.clip(np.rint(np.vstack(out_col)), 0, 255).astype(np.uint8),
        thermal=np.concatenate(out_th),
        ndvi=np.concatenate(out_nd),
        spectrum_ref=np.concatenate(out_ref),
        frame_ids=np.concatenate(out_fid),
        spectra=list(m.spectra),
    )


def attach_thermal(m: MultiLayerMap, frame_id: int, thermal_img: ImageBuffer,
                   calib: CalibrationSet, t_world_cam: RigidTransform) -> int:
    """Assign bilinear-sampled radiance to the frame's map points.

    ``t_world_cam`` is the world pose of the (unrectified) left camera for
    that frame. Points projecting out of the thermal image or behind the
    thermal camera keep their layer value absent. Returns the number of
    points that received a value.
    """
    if thermal_img.bit_depth != 16 or thermal_img.channels != 1:
        raise InvalidArgumentError("thermal image must be 16-bit single channel")
    sel = np.nonzero(m.frame_ids == frame_id)[0]
    if sel.size == 0:
        return 0
    t_thermal_world = compose(invert(calib.t_left_thermal), invert(t_world_cam))
    p_th = m.positions[sel] @ t_thermal_world.rotation.rotation_matrix().T + \
        t_thermal_world.translation.as_array()
    uv, in_front, _ = project_points(calib.thermal_cam, p_th)
    cam = calib.thermal_cam
    # Bilinear support needs the full 4-neighborhood inside the image.
    ok = in_front.copy()
    ok &= (uv[:, 0] >= 0) & (uv[:, 0] <= cam.width - 1)
    ok &= (uv[:, 1] >= 0) & (uv[:, 1] <= cam.height - 1)
    if not np.any(ok):
        return 0
    vals = bilinear_sample(thermal_img.pixels, uv[ok, 0], uv[ok, 1])
    m.thermal[sel[ok]] = vals
    return int(ok.sum())


def ndvi_from_red_nir(red: float, nir: float) -> float:
    """Normalized difference vegetation index from band reflectances."""
    denom = nir + red
    if denom == 0:
        raise UndefinedNdviError("NIR + RED is zero; NDVI undefined")
    return (nir - red) / denom


def _band_window_mean(values: np.ndarray, centers: np.ndarray, center: float):
    mask = np.abs(centers - center) <= BAND_WINDOW_NM
    if not np.any(mask):
        raise InvalidSpectrumError(
            f"spectrum has no band within {BAND_WINDOW_NM} nm of {center} nm"
        )
    return values[..., mask].mean(axis=-1)


def ndvi(s: Spectrum) -> float:
    """NDVI from a spectrum: RED and NIR are means of the bands within
    +/-5 nm of 670 nm and 800 nm respectively."""
    red = float(_band_window_mean(s.values, s.band_centers, RED_CENTER_NM))
    nir = float(_band_window_mean(s.values, s.band_centers, NIR_CENTER_NM))
    return ndvi_from_red_nir(red, nir)


def line_ndvi(line: VisNirLine) -> np.ndarray:
    """Per-column NDVI of a scan line; NaN where NIR + RED is zero."""
    values = np.asarray(line.values, dtype=float)
    red = _band_window_mean(values, line.band_centers, RED_CENTER_NM)
    nir = _band_window_mean(values, line.band_centers, NIR_CENTER_NM)
    denom = nir + red
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(denom != 0, (nir - red) / denom, np.nan)


def attach_spectra(m: MultiLayerMap, frame_id: int, line: VisNirLine,
                   scanline: ScanLine, cam: PinholeCamera,
                   t_world_cam: RigidTransform) -> int:
    """Attach spectra and NDVI to the frame's points lying on the scan line.

    Points whose projection into the (rectified) left camera falls within
    1 px perpendicular distance of v = a*u + b receive the spectrum of the
    nearest line column and its NDVI. Returns the number of points updated.
    """
    sel = np.nonzero(m.frame_ids == frame_id)[0]
    if sel.size == 0:
        return 0
    t_cam_world = invert(t_world_cam)
    p_cam = m.positions[sel] @ t_cam_world.rotation.rotation_matrix().T + \
        t_cam_world.translation.as_array()
    uv, in_front, in_bounds = project_points(cam, p_cam)
    dist = np.abs(scanline.a * uv[:, 0] - uv[:, 1] + scanline.b) / np.sqrt(scanline.a**2 + 1.0)
    on_line = in_front & in_bounds & (dist <= 1.0)
    if not np.any(on_line):
        return 0
    cols = np.clip((uv[on_line, 0] * line.ncols / cam.width).astype(int), 0, line.ncols - 1)
    col_ndvi = line_ndvi(line)
    ref_of_col = {}
    refs = np.empty(cols.size, dtype=np.int64)
    for i, c in enumerate(cols):
        c = int(c)
        if c not in ref_of_col:
            m.spectra.append(line.spectrum(c))
            ref_of_col[c] = len(m.spectra) - 1
        refs[i] = ref_of_col[c]
    idx = sel[on_line]
    m.ndvi[idx] = col_ndvi[cols]
    m.spectrum_ref[idx] = refs
    return int(on_line.sum())


def false_color(s: Spectrum, scale: float | None = None):
    """False-color rendering of a spectrum: R, G, B are the means of the
    first 100, following 100, and last 100 bands, scaled to 8 bits by
    ``scale`` (the line-wide maximum; defaults to this spectrum's max)."""
    if s.values.size < 300:
        raise InvalidSpectrumError(f"false color needs >= 300 bands, got {s.values.size}")
    r = s.values[:100].mean()
    g = s.values[100:200].mean()
    b = s.values[-100:].mean()
    peak = float(np.max(s.values)) if scale is None else float(scale)
    if peak <= 0:
        return (0, 0, 0)
    to8 = lambda x: int(np.clip(np.rint(255.0 * x / peak), 0, 255))
    return (to8(r), to8(g), to8(b))


def false_color_line(line: VisNirLine) -> np.ndarray:
    """False-color pixels for every column of a line, scaled by the
    line-wide maximum. Returns (ncols, 3) uint8."""
    peak = float(np.max(line.values)) if line.values.size else 0.0
    out = np.zeros((line.ncols, 3), dtype=np.uint8)
    for c in range(line.ncols):
        out[c] = false_color(line.spectrum(c), scale=peak if peak > 0 else None)
    return out
