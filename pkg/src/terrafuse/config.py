"""Pipeline configuration: one flat record of every tunable, JSON round-trip,
and the effective-config echo written into each output directory."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .errors import DatasetFormatError, InvalidArgumentError

SEED_ENV_VAR = "TERRAFUSE_SEED"


@dataclass
class PipelineConfig:
    # stereo matching
    sgm_d_max: int = 128
    sgm_p1: float = 10.0
    sgm_p2: float = 120.0
    sgm_paths: int = 8
    sgm_uniqueness: float = 0.05
    d_min: float = 1.0
    # cloud filtering
    filter_k: int = 8
    filter_alpha: float = 1.0
    voxel_size: float = 0.02
    # map merging
    cell_size: float = 0.02
    # patches
    footprint_length: float = 0.85
    footprint_width: float = 0.70
    frames_per_patch: int = 4
    # change detection
    cusum_k: float = 0.5
    cusum_h: float = 5.0
    cusum_warmup: int = 20
    cusum_one_sided: bool = False
    # synchronization
    tol_thermal: float = 0.070
    tol_visnir: float = 0.010
    # motion
    use_vo: bool = False
    vo_iterations: int = 200
    vo_inlier_tol: float = 0.02
    # run control
    seed: int = 0
    jobs: int = 1

    def validate(self) -> None:
        if self.sgm_d_max <= 0:
            raise InvalidArgumentError("sgm_d_max must be positive")
        if self.sgm_p2 < self.sgm_p1 or self.sgm_p1 <= 0:
            raise InvalidArgumentError("require 0 < sgm_p1 <= sgm_p2")
        if self.sgm_paths not in (4, 8):
            raise InvalidArgumentError("sgm_paths must be 4 or 8")
        for name in ("voxel_size", "cell_size", "footprint_length", "footprint_width",
                     "cusum_h", "tol_thermal", "tol_visnir", "vo_inlier_tol"):
            if getattr(self, name) <= 0:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.cusum_k < 0:
            raise InvalidArgumentError("cusum_k must be >= 0")
        if self.cusum_warmup < 2:
            raise InvalidArgumentError("cusum_warmup must be >= 2")
        if self.frames_per_patch < 1:
            raise InvalidArgumentError("frames_per_patch must be >= 1")
        if self.filter_k < 1:
            raise InvalidArgumentError("filter_k must be >= 1")
        if self.jobs < 1:
            raise InvalidArgumentError("jobs must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(PipelineConfig)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgumentError(f"unknown config keys: {sorted(unknown)}")
        cfg = PipelineConfig(**d)
        cfg.validate()
        return cfg

    @staticmethod
    def from_json(path) -> "PipelineConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetFormatError(f"cannot read config {path}: {exc}") from exc
        return PipelineConfig.from_dict(doc)

    def apply_env(self) -> "PipelineConfig":
        """TERRAFUSE_SEED overrides the configured seed."""
        env = os.environ.get(SEED_ENV_VAR)
        if env is not None:
            try:
                self.seed = int(env)
            except ValueError as exc:
                raise InvalidArgumentError(f"{SEED_ENV_VAR} must be an integer, got {env!r}") from exc
        return self

    def echo(self, out_dir) -> None:
        """Write the effective configuration into an output directory."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        )
