"""Command-line pipeline: synth -> fuse -> features -> detect (+ export).

Stages communicate through files (dataset directory, map PLY, feature and
event CSVs) so each one is independently runnable and testable. Every
output directory receives the echoed effective configuration. Outputs are
deterministic for a fixed dataset, config and seed, including across
``--jobs`` settings (frame results are merged in frame order); the only
exception is the timing block inside report.json.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import datasetio, fusionmap, motion, stereo, synthgen, terrafeat
from .config import PipelineConfig
from .cusum import CusumConfig, detect_changes
from .errors import (
    DatasetError,
    EmptyPatchError,
    EmptyWindowError,
    InsufficientDataError,
    InvalidArgumentError,
    TerrafuseError,
)
from .geomcore import RigidTransform, Vec3, compose, invert
from .imuproc import window_for_interval
from .motion import Correspondence3D, Trajectory, estimate_motion, pose_at
from .terrafeat import FeatureVector, Footprint, GroupFlags


class PipelineError(TerrafuseError):
    """Processing failure with stage context attached."""


# ---------------------------------------------------------------------------
# Per-frame stereo processing (worker-safe)

_WORKER = {}


def _worker_init(root: str, cfg: dict) -> None:
    _WORKER["log"] = datasetio.load_dataset(root)
    _WORKER["config"] = PipelineConfig.from_dict(cfg)


def _frame_cloud_from_bundle(log, config: PipelineConfig, index: int):
    """rectify -> SGM -> triangulate -> outlier filter -> voxel for one frame."""
    times = log.stereo_times()
    t = float(times[index])
    timings = {}
    tic = time.perf_counter()
    bundle = datasetio.bundle_at(log, t, datasetio.SyncTolerances(config.tol_thermal,
                                                                  config.tol_visnir))
    timings["load"] = time.perf_counter() - tic

    tic = time.perf_counter()
    left_r, right_r, rig = stereo.rectify(log.calib, bundle.left, bundle.right)
    timings["rectify"] = time.perf_counter() - tic

    tic = time.perf_counter()
    params = stereo.SgmParams(d_max=config.sgm_d_max, p1=config.sgm_p1, p2=config.sgm_p2,
                              paths=config.sgm_paths, uniqueness=config.sgm_uniqueness)
    disp = stereo.sgm_disparity(left_r, right_r, params)
    timings["sgm"] = time.perf_counter() - tic

    tic = time.perf_counter()
    cloud = stereo.triangulate(disp, rig, left_r, frame_id=index, d_min=config.d_min)
    timings["triangulate"] = time.perf_counter() - tic

    tic = time.perf_counter()
    cloud = stereo.statistical_outlier_filter(cloud, k=config.filter_k, alpha=config.filter_alpha)
    timings["filter"] = time.perf_counter() - tic

    tic = time.perf_counter()
    cloud = stereo.voxel_downsample(cloud, config.voxel_size)
    timings["voxel"] = time.perf_counter() - tic
    return bundle, cloud, rig, timings


def _process_frame(index: int):
    log = _WORKER["log"]
    config = _WORKER["config"]
    bundle, cloud, rig, timings = _frame_cloud_from_bundle(log, config, index)
    thermal = bundle.thermal.pixels if bundle.thermal is not None else None
    visnir = (bundle.visnir.values, bundle.visnir.band_centers) if bundle.visnir is not None else None
    return (index, cloud.positions, cloud.colors, thermal, visnir, timings)


# ---------------------------------------------------------------------------
# Trajectory sources


def _vo_trajectory(log, config: PipelineConfig) -> Trajectory:
    """Trajectory from the dataset's landmark tracks via RANSAC rigid fits."""
    lm_path = log.root / "gt_landmarks.csv"
    if not lm_path.is_file():
        raise DatasetError(f"--vo needs landmark tracks at {lm_path}")
    tracks = datasetio.read_landmarks_csv(lm_path)
    times = log.stereo_times()
    t_vehicle_left = log.calib.t_vehicle_left
    relatives = []
    for k in range(1, times.size):
        prev = tracks.get(k - 1, {})
        curr = tracks.get(k, {})
        common = sorted(set(prev) & set(curr))
        corrs = [Correspondence3D(Vec3.from_array(prev[i][2]), Vec3.from_array(curr[i][2]))
                 for i in common]
        try:
            est = estimate_motion(corrs, iterations=config.vo_iterations,
                                  inlier_tol=config.vo_inlier_tol, seed=config.seed)
        except InsufficientDataError as exc:
            raise PipelineError(f"visual odometry failed between frames {k-1} and {k}: {exc}") from exc
        relatives.append(invert(est.transform))
    poses_left = motion.accumulate(relatives, t0=t_vehicle_left)
    poses_vehicle = [compose(p, invert(t_vehicle_left)) for p in poses_left]
    return Trajectory.from_poses(times, poses_vehicle)


def _trajectory_for(log, config: PipelineConfig) -> Trajectory:
    if not config.use_vo:
        traj = log.trajectory()
        if traj is not None:
            return traj
    return _vo_trajectory(log, config)


# ---------------------------------------------------------------------------
# Stages


def run_fuse(dataset_root, config: PipelineConfig, out_dir):
    """Fuse a dataset into a multi-layer map; writes map.ply and report.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.echo(out)
    log = datasetio.load_dataset(dataset_root)
    times = log.stereo_times()
    if times.size == 0:
        raise DatasetError(f"dataset {dataset_root} has no stereo frames")
    traj = _trajectory_for(log, config)
    calib = log.calib

    n = times.size
    results = {}
    totals: dict = {}
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs, initializer=_worker_init,
                                 initargs=(str(dataset_root), config.to_dict())) as pool:
            for res in pool.map(_process_frame, range(n)):
                results[res[0]] = res[1:]
    else:
        _worker_init(str(dataset_root), config.to_dict())
        for i in range(n):
            res = _process_frame(i)
            results[res[0]] = res[1:]
        _WORKER.clear()

    m = fusionmap.MultiLayerMap.empty(config.cell_size)
    warnings = []
    thermal_seen = False
    visnir_seen = False
    rig_rot = None
    attach_time = merge_time = 0.0
    for i in range(n):
        positions, colors, thermal_px, visnir_payload, timings = results[i]
        for stage, dt in timings.items():
            totals[stage] = totals.get(stage, 0.0) + dt
        try:
            if rig_rot is None:
                rig_rot = stereo._rectifying_rotation(calib)
            t_rect_left = RigidTransform(
                stereo.UnitQuaternion.from_rotation_matrix(rig_rot), Vec3.zero())
            pose_vehicle, _ = pose_at(traj, float(times[i]))
            t_world_left = compose(pose_vehicle, calib.t_vehicle_left)
            t_world_rect = compose(t_world_left, invert(t_rect_left))

            cloud = stereo.PointCloud(positions, colors,
                                      np.full(positions.shape[0], i, dtype=np.int32), "camera")
            tic = time.perf_counter()
            m = fusionmap.merge_cloud(m, cloud, t_world_rect)
            merge_time += time.perf_counter() - tic

            tic = time.perf_counter()
            if thermal_px is not None:
                thermal_img = stereo.ImageBuffer(thermal_px.shape[1], thermal_px.shape[0],
                                                 1, 16, thermal_px)
                fusionmap.attach_thermal(m, i, thermal_img, calib, t_world_left)
                thermal_seen = True
            if visnir_payload is not None:
                line = fusionmap.VisNirLine(visnir_payload[0], visnir_payload[1])
                rect_cam = stereo.PinholeCamera(
                    fx=(calib.left_cam.fx + calib.left_cam.fy + calib.right_cam.fx
                        + calib.right_cam.fy) / 4.0,
                    fy=(calib.left_cam.fx + calib.left_cam.fy + calib.right_cam.fx
                        + calib.right_cam.fy) / 4.0,
                    cx=(calib.left_cam.cx + calib.right_cam.cx) / 2.0,
                    cy=(calib.left_cam.cy + calib.right_cam.cy) / 2.0,
                    width=calib.left_cam.width, height=calib.left_cam.height)
                fusionmap.attach_spectra(m, i, line, calib.scanline, rect_cam, t_world_rect)
                visnir_seen = True
            attach_time += time.perf_counter() - tic
        except TerrafuseError as exc:
            raise PipelineError(f"frame {i} (t={times[i]:.3f}): {exc}") from exc
    totals["merge"] = merge_time
    totals["attach"] = attach_time

    if not thermal_seen:
        warnings.append("no thermal frames within tolerance; thermal layer is empty")
    if not visnir_seen:
        warnings.append("no visnir lines within tolerance; ndvi layer is empty")
    if len(m) == 0:
        raise PipelineError("fused map is empty")
    datasetio.export_ply(m, out / "map.ply")
    report = {
        "frames": int(n),
        "points": int(len(m)),
        "thermal_points": int(np.isfinite(m.thermal).sum()),
        "ndvi_points": int(np.isfinite(m.ndvi).sum()),
        "warnings": warnings,
        "seed": config.seed,
        "timings": {k: round(v, 6) for k, v in sorted(totals.items())},
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return m, traj, report


def _nan_feature_row(t_mid: float) -> FeatureVector:
    nan4 = np.full(4, np.nan)
    return FeatureVector(t_mid=t_mid, color=np.full(12, np.nan), thermal=nan4.copy(),
                         ndvi=nan4.copy(), rms_az=float("nan"),
                         flags=GroupFlags(True, True, True, True))


def run_features(dataset_root, config: PipelineConfig, out_dir, map_path=None):
    """Segment patches and export the per-patch feature CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.echo(out)
    log = datasetio.load_dataset(dataset_root)
    if map_path is not None:
        m = datasetio.load_ply(map_path)
        traj = _trajectory_for(log, config)
    else:
        m, traj, _ = run_fuse(dataset_root, config, out)
    times = log.stereo_times()
    footprint = Footprint(config.footprint_length, config.footprint_width)
    patches = terrafeat.segment_patches(m, traj, times, footprint,
                                        frames_per_patch=config.frames_per_patch)
    rows = []
    for patch in patches:
        try:
            window = window_for_interval(log.imu, patch.t_start, patch.t_end)
        except (EmptyWindowError, InvalidArgumentError):
            window = None
        try:
            fv = terrafeat.patch_features(patch, window)
        except EmptyPatchError:
            fv = _nan_feature_row(patch.t_mid)
        rows.append(fv)
    datasetio.export_features_csv(rows, out / "features.csv")
    return rows


def run_detect(features_csv, config: PipelineConfig, out_dir, plot: bool = False):
    """CUSUM change detection over a feature CSV; writes events.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.echo(out)
    rows = datasetio.read_features_csv(features_csv)
    cusum_cfg = CusumConfig(k=config.cusum_k, h=config.cusum_h,
                            warmup=config.cusum_warmup, one_sided=config.cusum_one_sided)
    events = detect_changes(rows, cusum_cfg)
    datasetio.export_events_csv(events, out / "events.csv")
    if plot:
        _plot_features(rows, events, out)
    return events


def _plot_features(rows, events, out_dir) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ts = np.array([t for t, _ in rows])
    groups = {
        "color": terrafeat.FEATURE_COLUMNS[:12],
        "thermal": terrafeat.FEATURE_COLUMNS[12:16],
        "ndvi": terrafeat.FEATURE_COLUMNS[16:20],
        "rms": ["rms_az"],
    }
    by_col: dict = {}
    for _, fv in rows:
        for name, val in zip(terrafeat.FEATURE_COLUMNS, fv.values()):
            by_col.setdefault(name, []).append(val)
    for group, cols in groups.items():
        fig, ax = plt.subplots(figsize=(8, 4))
        for name in cols:
            ax.plot(ts, by_col[name], label=name, linewidth=1)
        for e in events:
            if e.feature in cols:
                ax.axvline(e.t, color="k", linestyle="--", linewidth=0.8)
        ax.set_xlabel("t [s]")
        ax.set_title(f"{group} features")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(Path(out_dir) / f"features_{group}.png", dpi=110)
        plt.close(fig)


def run_export(features_csv, out_dir, events_csv=None, plot: bool = True):
    """Summarise a run: feature stats, event list, optional plots."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = datasetio.read_features_csv(features_csv)
    events = datasetio.read_events_csv(events_csv) if events_csv else []
    values = np.array([fv.values() for _, fv in rows]) if rows else np.empty((0, 21))
    with np.errstate(all="ignore"):
        summary = {
            "rows": len(rows),
            "events": [{"t": e.t, "feature": e.feature} for e in events],
            "feature_means": {
                name: (float(np.nanmean(values[:, i])) if len(rows) else None)
                for i, name in enumerate(terrafeat.FEATURE_COLUMNS)
            },
        }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if plot and rows:
        _plot_features(rows, events, out)
    return summary


# ---------------------------------------------------------------------------
# WorldSpec JSON


def worldspec_from_dict(doc: dict) -> synthgen.WorldSpec:
    kwargs = dict(doc)
    if "segments" in kwargs:
        kwargs["segments"] = tuple(synthgen.Segment(s["material"], float(s["length"]))
                                   for s in kwargs["segments"])
    if "obstacles" in kwargs:
        kwargs["obstacles"] = tuple(synthgen.Box(**b) for b in kwargs["obstacles"])
    if "rates" in kwargs:
        kwargs["rates"] = synthgen.SensorRates(**kwargs["rates"])
    if "materials" in kwargs and kwargs["materials"] is not None:
        table = synthgen.default_materials()
        mats = {}
        for name, overrides in kwargs["materials"].items():
            base = table.get(name, synthgen.Material(name=name))
            fields = {**base.__dict__, **overrides, "name": name}
            if "reflectance_knots" in fields:
                fields["reflectance_knots"] = tuple(tuple(k) for k in fields["reflectance_knots"])
            if "rgb" in fields:
                fields["rgb"] = tuple(fields["rgb"])
            mats[name] = synthgen.Material(**fields)
        kwargs["materials"] = mats
    return synthgen.WorldSpec(**kwargs)


# ---------------------------------------------------------------------------
# Argument parsing


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file (PipelineConfig fields)")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--sgm-d-max", type=int, dest="sgm_d_max")
    p.add_argument("--sgm-p1", type=float, dest="sgm_p1")
    p.add_argument("--sgm-p2", type=float, dest="sgm_p2")
    p.add_argument("--sgm-paths", type=int, dest="sgm_paths")
    p.add_argument("--d-min", type=float, dest="d_min")
    p.add_argument("--filter-k", type=int, dest="filter_k")
    p.add_argument("--filter-alpha", type=float, dest="filter_alpha")
    p.add_argument("--voxel-size", type=float, dest="voxel_size")
    p.add_argument("--cell-size", type=float, dest="cell_size")
    p.add_argument("--footprint-length", type=float, dest="footprint_length")
    p.add_argument("--footprint-width", type=float, dest="footprint_width")
    p.add_argument("--frames-per-patch", type=int, dest="frames_per_patch")
    p.add_argument("--cusum-k", type=float, dest="cusum_k")
    p.add_argument("--cusum-h", type=float, dest="cusum_h")
    p.add_argument("--cusum-warmup", type=int, dest="cusum_warmup")
    p.add_argument("--one-sided", action="store_true", dest="cusum_one_sided", default=None)
    p.add_argument("--tol-thermal", type=float, dest="tol_thermal")
    p.add_argument("--tol-visnir", type=float, dest="tol_visnir")
    p.add_argument("--vo", action="store_true", dest="use_vo", default=None)


def _config_from_args(args) -> PipelineConfig:
    cfg = PipelineConfig.from_json(args.config) if args.config else PipelineConfig()
    for f in ("seed", "jobs", "sgm_d_max", "sgm_p1", "sgm_p2", "sgm_paths", "d_min",
              "filter_k", "filter_alpha", "voxel_size", "cell_size", "footprint_length",
              "footprint_width", "frames_per_patch", "cusum_k", "cusum_h", "cusum_warmup",
              "cusum_one_sided", "tol_thermal", "tol_visnir", "use_vo"):
        v = getattr(args, f, None)
        if v is not None:
            setattr(cfg, f, v)
    cfg.apply_env()
    cfg.validate()
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="terrafuse",
        description="Multi-sensor terrain mapping, patch features and ground-change detection.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--preset", default="grass-paved",
                   help="grass-paved | three-surface | grass | paved | ploughed")
    p.add_argument("--world", type=Path, help="WorldSpec JSON (overrides --preset)")
    p.add_argument("--duration", type=float, help="truncate the run to this many seconds")
    _add_config_flags(p)

    p = sub.add_parser("fuse", help="fuse a dataset into a multi-layer map PLY")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)

    p = sub.add_parser("features", help="extract per-patch features to CSV")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--map", type=Path, help="existing map PLY (otherwise fuse runs first)")
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)

    p = sub.add_parser("detect", help="CUSUM change detection over a feature CSV")
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--plot", action="store_true")
    _add_config_flags(p)

    p = sub.add_parser("export", help="summarise features/events, optional plots")
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--events", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--plot", action="store_true")
    _add_config_flags(p)
    return parser


def _cmd_synth(args, config: PipelineConfig) -> int:
    if args.world:
        doc = json.loads(Path(args.world).read_text())
        spec = worldspec_from_dict(doc)
    else:
        spec = synthgen.preset_world(args.preset)
    if args.duration is not None:
        total = spec.speed * args.duration
        segs = []
        used = 0.0
        for s in spec.segments:
            if used + s.length >= total:
                segs.append(synthgen.Segment(s.material, max(total - used, 1e-6)))
                used = total
                break
            segs.append(s)
            used += s.length
        spec = synthgen.WorldSpec(**{**spec.__dict__, "segments": tuple(segs)})
    world = synthgen.generate_world(spec, config.seed)
    counts = synthgen.generate_dataset(world, args.out)
    config.echo(args.out)
    print(f"dataset written to {args.out}: {counts}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _config_from_args(args)
        if args.command == "synth":
            return _cmd_synth(args, config)
        if args.command == "fuse":
            _, _, report = run_fuse(args.dataset, config, args.out)
            print(f"fused {report['frames']} frames into {report['points']} points -> {args.out}")
            return 0
        if args.command == "features":
            rows = run_features(args.dataset, config, args.out, map_path=args.map)
            print(f"wrote {len(rows)} feature rows -> {args.out}")
            return 0
        if args.command == "detect":
            events = run_detect(args.features, config, args.out, plot=args.plot)
            print(f"{len(events)} change events -> {args.out}")
            return 0
        if args.command == "export":
            summary = run_export(args.features, args.out, events_csv=args.events, plot=args.plot)
            print(f"summary of {summary['rows']} rows -> {args.out}")
            return 0
        raise InvalidArgumentError(f"unknown command {args.command!r}")
    except (DatasetError, InvalidArgumentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TerrafuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
