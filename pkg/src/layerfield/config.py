"""Declarative run configuration shared by every command."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import torch

from . import __version__


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    dtype: str = "float32"

    # image encoder / feature pyramid
    encoder_channels: tuple[int, ...] = (16, 32, 64)
    encoder_strides: tuple[int, ...] = (1, 2, 2)
    fused_channels: int = 32

    # body model
    downsample_target: int | None = None

    # alignment
    align_steps: int = 2
    use_alignment: bool = True
    compact_channels: int = 64
    vertex_reduce_channels: int = 8
    align_key_dim: int = 16
    align_hidden: int = 128

    # diffused volumes
    grid_resolution: int = 32
    grid_padding: float = 0.05
    diffuse_channels: int = 16

    # rays / layers
    aabb_padding: float = 0.05
    samples_per_segment: int = 24

    # fusion + radiance predictor
    fusion_mode: str = "attention"
    fusion_channels: int = 32
    fusion_key_dim: int = 16
    sigma_width: int = 128
    sigma_depth: int = 4
    color_width: int = 64
    color_depth: int = 2
    rgb_key_dim: int = 16
    view_freqs: int = 4
    rgb_freqs: int = 2
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    # loss
    lambda_ph: float = 1.0
    lambda_kpts: float = 0.01
    lambda_reg: float = 0.001

    # optimisation
    iterations: int = 5000
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rays_per_batch: int = 256
    random_rays: int = 32
    checkpoint_every: int = 1000
    log_every: int = 50
    render_chunk: int = 1024
    perturb_every_step: bool = False

    def __post_init__(self):
        for name in ("encoder_channels", "encoder_strides", "background"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self):
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if len(self.encoder_channels) != len(self.encoder_strides):
            raise ConfigError("encoder_channels and encoder_strides differ in length")
        if self.align_steps < 1:
            raise ConfigError("align_steps must be >= 1")
        if self.align_steps > self.pyramid_levels - 1:
            raise ConfigError(
                f"align_steps={self.align_steps} needs {self.align_steps + 1} pyramid levels, "
                f"encoder provides {self.pyramid_levels}"
            )
        if self.fusion_mode not in ("attention", "average"):
            raise ConfigError(f"unknown fusion_mode {self.fusion_mode!r}")
        if self.grid_resolution < 2 or self.samples_per_segment < 1:
            raise ConfigError("grid_resolution >= 2 and samples_per_segment >= 1 required")
        for name in ("lambda_ph", "lambda_kpts", "lambda_reg"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")

    @property
    def pyramid_levels(self) -> int:
        return len(self.encoder_channels)

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(data)


def provenance(cfg: RunConfig) -> dict:
    """Fields stamped onto every output document."""
    return {"config_hash": cfg.hash(), "version": __version__}
