"""Flat key = value run configuration with documented defaults.

Unknown keys are rejected.  Every run writes a resolved snapshot of the
full configuration next to its outputs so (snapshot, seed) reproduces all
artifacts.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .cropgrid import GridSpec
from .errors import ConfigError
from .model import EncoderConfig
from .synthgen import PhantomSpec

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


@dataclass
class RunConfig:
    # data generation
    phantom_count: int = 512
    phantom_side: int = 256
    phantom_jitter: float = 0.04
    phantom_scale_jitter: float = 0.12
    phantom_noise: float = 0.02
    phantom_texture: float = 0.15
    phantom_bg_jitter: float = 0.05
    phantom_gain_jitter: float = 0.25
    phantom_field: float = 0.12
    phantom_weave: float = 0.0
    phantom_level_jitter: float = 0.25
    phantom_mosaic: float = 0.0
    phantom_mosaic_levels: int = 5
    phantom_mosaic_scale: float = 0.04

    # crop geometry (desk defaults; paper scale is G=32, m=32, c1=14, c2=28, H0=448)
    grid_patches: int = 16
    patch_pixels: int = 16
    crop1_patches: int = 8
    crop2_patches: int = 16
    resize_side: int = 64

    # encoder
    embed_dim: int = 32
    encoder_depth: int = 2
    encoder_hidden: int = 64

    # optimization
    epochs: int = 30
    warmup_epochs: int = 3
    batch_size: int = 8
    base_lr: float = 5e-4
    weight_decay_start: float = 0.04
    weight_decay_end: float = 0.4
    grad_clip_norm: float = 0.8
    lambda_global: float = 0.1
    lambda_comp: float = 1.0
    lambda_decomp: float = 1.0
    alpha_comp: float = 0.9
    alpha_decomp: float = 0.99
    tau_student: float = 0.1
    tau_teacher: float = 0.04
    centering: bool = True
    positive_only: bool = False
    local_halving: bool = False
    checkpoint_every: int = 10
    seed: int = 0
    threads: int = 1

    # photometric augmentation amplitudes
    aug_brightness: float = 0.1
    aug_contrast: float = 0.1
    aug_noise: float = 0.02
    aug_blur: float = 0.0

    # matching target kernel
    kernel_size: int = 3
    kernel_sigma: float = 1.0

    def grid_spec(self) -> GridSpec:
        return GridSpec(G=self.grid_patches, m=self.patch_pixels,
                        c1=self.crop1_patches, c2=self.crop2_patches,
                        H0=self.resize_side)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(K=self.embed_dim, T=self.crop1_patches,
                             H0=self.resize_side, depth=self.encoder_depth,
                             hidden=self.encoder_hidden, seed=self.seed)

    def phantom_spec(self) -> PhantomSpec:
        return PhantomSpec(side=self.phantom_side,
                           jitter_translate=self.phantom_jitter,
                           jitter_scale=self.phantom_scale_jitter,
                           intensity_noise=self.phantom_noise,
                           texture_amp=self.phantom_texture,
                           bg_jitter=self.phantom_bg_jitter,
                           gain_jitter=self.phantom_gain_jitter,
                           field_amp=self.phantom_field,
                           weave_amp=self.phantom_weave,
                           level_jitter=self.phantom_level_jitter,
                           mosaic_contrast=self.phantom_mosaic,
                           mosaic_levels=self.phantom_mosaic_levels,
                           mosaic_scale=self.phantom_mosaic_scale)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    ftype = _FIELD_TYPES[key]
    raw = raw.strip()
    if ftype == "bool":
        low = raw.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    raise ConfigError(f"{key}: unsupported field type {ftype}")


def apply_overrides(cfg: RunConfig, pairs: list[str]) -> RunConfig:
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, _parse_value(key, raw))
    return cfg


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        pairs = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
            pairs.append(stripped)
        apply_overrides(cfg, pairs)
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg


def write_snapshot(cfg: RunConfig, path) -> None:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(RunConfig)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
