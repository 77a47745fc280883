"""Run configuration: every default matches the published training recipe
where one exists (SSIM mix 0.85, loss weights {1, 0.1, 0.01} and
{2, 0.5, 0.01}, rank 4, 5000 warm-up steps, batch 8, 3 epochs x 1000
iterations at learning rate 1e-4, per-dataset depth caps).

Configs load from JSON; unknown keys are rejected and a parse -> serialize ->
parse round trip is the identity.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .losses import LossWeights
from .metrics import DEPTH_CAP_PRESETS_MM

OUTPUT_ROOT_ENV = "MONORECON_OUT"


class ConfigError(ValueError):
    """Invalid or unknown configuration input."""


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "out"
    frames: int = 10

    # loss weights
    ssim_alpha: float = 0.85
    lambda_p: float = 1.0
    lambda_e: float = 0.1
    lambda_sssi: float = 0.01
    lambda_pc: float = 2.0
    lambda_gc: float = 0.5
    lambda_regu: float = 0.01

    # adaptation
    rank: int = 4
    warmup_steps: int = 5000
    batch_size: int = 8

    # reconstruction optimization
    epochs: int = 3
    iters_per_epoch: int = 1000
    learning_rate: float = 1e-4
    patch_size: int = 32
    local_window: int = 1
    global_stride: int = 0            # 0 = derive max(2, n_frames // 5)
    subsample_stride: int = 2

    # fusion / evaluation
    voxel_size_mm: float = 0.0        # 0 = scene diagonal / 128
    recon_threshold_mm: float = 5.0
    depth_cap_mm: float = DEPTH_CAP_PRESETS_MM["scared"]

    # toy depth decode range
    depth_min_mm: float = 20.0
    depth_max_mm: float = 150.0

    def __post_init__(self) -> None:
        if self.frames < 2:
            raise ConfigError("frames must be at least 2")
        if not 0.0 <= self.ssim_alpha <= 1.0:
            raise ConfigError("ssim_alpha must lie in [0, 1]")
        for name in ("lambda_p", "lambda_e", "lambda_sssi", "lambda_pc", "lambda_gc",
                     "lambda_regu"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("rank", "warmup_steps", "batch_size", "iters_per_epoch",
                     "patch_size", "local_window", "subsample_stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0 or self.global_stride < 0:
            raise ConfigError("epochs and global_stride must be non-negative")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        for name in ("recon_threshold_mm", "depth_cap_mm", "depth_min_mm", "depth_max_mm"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.voxel_size_mm < 0:
            raise ConfigError("voxel_size_mm must be non-negative (0 = automatic)")
        if self.depth_min_mm >= self.depth_max_mm:
            raise ConfigError("depth_min_mm must be below depth_max_mm")

    def loss_weights(self) -> LossWeights:
        return LossWeights(alpha=self.ssim_alpha, lambda_p=self.lambda_p,
                           lambda_e=self.lambda_e, lambda_sssi=self.lambda_sssi,
                           lambda_pc=self.lambda_pc, lambda_gc=self.lambda_gc,
                           lambda_regu=self.lambda_regu)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        return cls.from_dict(data)

    def with_overrides(self, **overrides) -> "RunConfig":
        """New config with the given fields replaced (None values ignored)."""
        data = dataclasses.asdict(self)
        for key, val in overrides.items():
            if val is None:
                continue
            if key not in data:
                raise ConfigError(f"unknown config key: {key}")
            data[key] = val
        return RunConfig.from_dict(data)
