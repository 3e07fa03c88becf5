"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # paths
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    report_path: str = "report.json"
    # phantoms
    n_pairs: int = 8
    dims: tuple = (32, 32, 32)
    branch_count: int = 7
    radius_min: float = 1.2
    radius_max: float = 2.5
    tortuosity: float = 0.3
    contrast_angio: float = 0.7
    contrast_nonangio: float = 0.15
    noise_sigma: float = 0.02
    background: float = 0.2
    # codec
    patch_size: int = 4
    latent_channels: int = 8
    codec_epochs: int = 20
    codec_lr: float = 0.1
    codec_ema_decay: float = 0.999
    # embedder
    embed_dim: int = 16
    temperature: float = 0.07
    embedder_epochs: int = 100
    embedder_lr: float = 1e-3
    embedder_batch: int = 32
    embedder_ema_decay: float = 0.99
    mask_weight: float = 1.0
    # tree scan / attention
    state_size: int = 16
    sharpness: float = 1.0
    attn_w: float = 1.0
    attn_radius: int = 2
    scan_mode: str = "tree"
    # diffusion
    t_steps: int = 50
    alpha_start: float = 0.999
    alpha_end: float = 0.01
    n_blocks: int = 4
    loss_info: float = 1.0
    loss_diff: float = 1.0
    loss_scan: float = 0.01
    diffusion_lr: float = 2e-3
    diffusion_steps: int = 2000
    # general
    axis: str = "z"
    seed: int = 0

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)
        need(len(self.dims) == 3 and min(self.dims) >= 1, "dims must be three positive integers")
        need(self.n_pairs >= 1, "n_pairs must be >= 1")
        need(self.branch_count >= 1, "branch_count must be >= 1")
        need(0 < self.radius_min <= self.radius_max, "need 0 < radius_min <= radius_max")
        need(self.radius_max < min(self.dims[1:]) / 4, "radius_max must be < min(H, W)/4")
        need(self.tortuosity >= 0 and self.noise_sigma >= 0, "tortuosity, noise_sigma must be >= 0")
        need(0 < self.contrast_nonangio < self.contrast_angio <= 1,
             "need 0 < contrast_nonangio < contrast_angio <= 1")
        need(0 <= self.background < 1, "background must lie in [0, 1)")
        need(self.patch_size >= 1, "patch_size must be >= 1")
        need(self.dims[1] % self.patch_size == 0 and self.dims[2] % self.patch_size == 0,
             "slice dims must be divisible by patch_size")
        need(1 <= self.latent_channels <= self.patch_size ** 2, "latent_channels must lie in [1, p^2]")
        for name in ("codec_ema_decay", "embedder_ema_decay"):
            need(0 <= getattr(self, name) <= 1, f"{name} must lie in [0, 1]")
        for name in ("codec_epochs", "embedder_epochs", "diffusion_steps"):
            need(getattr(self, name) >= 0, f"{name} must be >= 0")
        for name in ("codec_lr", "embedder_lr", "diffusion_lr", "mask_weight"):
            need(getattr(self, name) >= 0, f"{name} must be >= 0")
        need(self.embed_dim >= 1 and self.state_size >= 1, "embed_dim, state_size must be >= 1")
        need(self.temperature > 0, "temperature must be > 0")
        need(self.embedder_batch >= 2, "embedder_batch must be >= 2")
        need(self.sharpness > 0, "sharpness must be > 0")
        need(self.attn_radius >= 1, "attn_radius must be >= 1")
        need(self.scan_mode in ("tree", "identity"), "scan_mode must be 'tree' or 'identity'")
        need(self.t_steps >= 1, "t_steps must be >= 1")
        need(1 > self.alpha_start > self.alpha_end > 0, "need 1 > alpha_start > alpha_end > 0")
        need(self.n_blocks >= 1, "n_blocks must be >= 1")
        weights = (self.loss_info, self.loss_diff, self.loss_scan)
        need(min(weights) >= 0 and max(weights) > 0, "loss weights must be >= 0, not all zero")
        need(self.axis in ("z", "y", "x"), "axis must be z, y or x")
        need(0 <= self.seed < 2 ** 64, "seed must be an unsigned 64-bit integer")
        return self

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validate()


_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def _parse_value(key, raw):
    kind = _TYPES[key]
    try:
        if kind is tuple:
            return tuple(int(p) for p in raw.replace(",", " ").split())
        if kind is bool:
            return raw.lower() in ("1", "true", "yes")
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return dataclasses.replace(base or RunConfig(), **values).validate()


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
