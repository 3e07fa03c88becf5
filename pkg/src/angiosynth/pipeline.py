"""Stage orchestration: phantoms -> codec -> embedder -> diffusion -> synthesis.

Every trained tensor is rounded to float32 at the end of its stage so that a
checkpoint round trip reproduces it bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codec import CodecParams, decode_slice, train_codec
from .config import ConfigError, RunConfig
from .denoiser import DenoiserConfig, DenoiserParams
from .diffusion import (LatentStats, LossWeights, NoiseSchedule, condition_for, make_schedule,
                        sample, train_diffusion, volume_latents)
from .embedder import EmbedderParams, train_embedder
from .volume import PhantomSpec, Volume3D, VolumePair, extract_slices, generate_phantom, stack_slices

SCAN_MODES = ("tree", "identity")


def f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def s32(x) -> float:
    return float(np.float32(x))


def _round_dict(d):
    return {k: f32(v) for k, v in d.items()}


def phantom_spec(cfg: RunConfig, seed: int) -> PhantomSpec:
    spec = PhantomSpec(dims=tuple(cfg.dims), branch_count=cfg.branch_count,
                       radius_range=(cfg.radius_min, cfg.radius_max), tortuosity=cfg.tortuosity,
                       vessel_contrast_angio=cfg.contrast_angio,
                       vessel_contrast_nonangio=cfg.contrast_nonangio,
                       noise_sigma=cfg.noise_sigma, seed=seed, background=cfg.background)
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(f"phantom settings: {exc}") from exc
    return spec


def make_pairs(cfg: RunConfig, n: int | None = None, offset: int = 0) -> list[VolumePair]:
    """Phantom pairs seeded cfg.seed + offset + i."""
    n = cfg.n_pairs if n is None else n
    return [generate_phantom(phantom_spec(cfg, cfg.seed + offset + i)) for i in range(n)]


def denoiser_config(cfg: RunConfig, scan_mode: str | None = None) -> DenoiserConfig:
    return DenoiserConfig(channels=cfg.latent_channels, width=cfg.embed_dim,
                          state_size=cfg.state_size, n_blocks=cfg.n_blocks, t_steps=cfg.t_steps,
                          sharpness=s32(cfg.sharpness), attn_w=s32(cfg.attn_w),
                          attn_radius=cfg.attn_radius,
                          scan_mode=scan_mode or cfg.scan_mode)


def schedule_for(cfg: RunConfig) -> NoiseSchedule:
    s = make_schedule(cfg.t_steps, cfg.alpha_start, cfg.alpha_end)
    return NoiseSchedule(f32(s.alpha))


# ---------------------------------------------------------------- stages


def run_codec(cfg: RunConfig, pairs, history=None) -> CodecParams:
    slices = [s for p in pairs for v in (p.angio, p.non_angio) for s in extract_slices(v, cfg.axis)]
    c = train_codec(slices, epochs=cfg.codec_epochs, lr=cfg.codec_lr, patch_size=cfg.patch_size,
                    channels=cfg.latent_channels, ema_decay=cfg.codec_ema_decay, seed=cfg.seed,
                    history=history)
    return CodecParams(f32(c.encoder), f32(c.decoder), c.patch_size, s32(c.ema_decay),
                       _round_dict(c.ema_shadow))


def run_embedder(cfg: RunConfig, pairs, codec: CodecParams, history=None) -> EmbedderParams:
    e = train_embedder(pairs, codec.shadow_params(), epochs=cfg.embedder_epochs,
                       lr=cfg.embedder_lr, tau=cfg.temperature, embed_dim=cfg.embed_dim,
                       ema_decay=cfg.embedder_ema_decay, batch_size=cfg.embedder_batch,
                       mask_weight=cfg.mask_weight, seed=cfg.seed, axis=cfg.axis, history=history)
    return EmbedderParams(_round_dict(e.weights), s32(e.temperature), s32(e.ema_decay),
                          _round_dict(e.ema_shadow))


@dataclass
class Model:
    codec: CodecParams          # inference (shadow) weights
    embedder: EmbedderParams    # jointly tuned embedder; shadow used at inference
    denoiser: DenoiserParams
    stats: LatentStats
    schedule: NoiseSchedule
    axis: str = "z"
    history: dict = field(default_factory=dict)


def run_diffusion(cfg: RunConfig, pairs, codec: CodecParams, embedder: EmbedderParams,
                  scan_mode: str | None = None, history=None) -> Model:
    schedule = schedule_for(cfg)
    inf_codec = codec.shadow_params()
    weights = LossWeights(cfg.loss_info, cfg.loss_diff, cfg.loss_scan)
    params, stats, tuned = train_diffusion(
        pairs, inf_codec, embedder.shadow_params(), schedule, weights, steps=cfg.diffusion_steps,
        lr=cfg.diffusion_lr, seed=cfg.seed, config=denoiser_config(cfg, scan_mode), axis=cfg.axis,
        history=history)
    tuned = EmbedderParams(_round_dict(tuned.weights), tuned.temperature, tuned.ema_decay,
                           _round_dict(tuned.ema_shadow))
    return Model(inf_codec, tuned, params, LatentStats(f32(stats.mean), f32(stats.std)), schedule,
                 cfg.axis)


def train_all(cfg: RunConfig, pairs, scan_mode: str | None = None) -> Model:
    hist = {"codec": [], "embedder": [], "diffusion": []}
    codec = run_codec(cfg, pairs, hist["codec"])
    embedder = run_embedder(cfg, pairs, codec, hist["embedder"])
    model = run_diffusion(cfg, pairs, codec, embedder, scan_mode, hist["diffusion"])
    model.history = hist
    return model


def synthesize(model: Model, non_angio: Volume3D, seed: int = 0) -> Volume3D:
    """Angio-like volume from a non-angio one, decoded and clipped to [0, 1]."""
    latents = volume_latents(non_angio, model.codec, model.axis)
    cond = condition_for(latents, model.embedder.shadow_params())
    z = sample(cond, model.schedule, model.denoiser, seed)
    slices = np.clip(decode_slice(model.stats.denormalize(z), model.codec), 0.0, 1.0)
    return stack_slices(list(slices), model.axis, non_angio.spacing)


# ---------------------------------------------------------------- checkpoints


def codec_entries(codec: CodecParams):
    tensors = {"codec/encoder": codec.encoder, "codec/decoder": codec.decoder,
               "codec/ema/encoder": codec.ema_shadow["encoder"],
               "codec/ema/decoder": codec.ema_shadow["decoder"]}
    scalars = {"codec/patch_size": codec.patch_size, "codec/ema_decay": codec.ema_decay}
    return tensors, scalars


def codec_from(tensors, scalars) -> CodecParams:
    return CodecParams(f32(tensors["codec/encoder"]), f32(tensors["codec/decoder"]),
                       int(scalars["codec/patch_size"]), scalars["codec/ema_decay"],
                       {"encoder": f32(tensors["codec/ema/encoder"]),
                        "decoder": f32(tensors["codec/ema/decoder"])})


def embedder_entries(e: EmbedderParams, prefix: str = "embedder/"):
    tensors = {prefix + k: v for k, v in e.weights.items()}
    tensors.update({prefix + "ema/" + k: v for k, v in e.ema_shadow.items()})
    scalars = {prefix + "temperature": e.temperature, prefix + "ema_decay": e.ema_decay}
    return tensors, scalars


def embedder_from(tensors, scalars, prefix: str = "embedder/") -> EmbedderParams:
    w, shadow = {}, {}
    for name, v in tensors.items():
        if not name.startswith(prefix):
            continue
        key = name[len(prefix):]
        if key.startswith("ema/"):
            shadow[key[4:]] = f32(v)
        else:
            w[key] = f32(v)
    # rank-0 tensors come back as scalars
    if "head_b" not in w and prefix + "head_b" in scalars:
        w["head_b"] = f32(scalars[prefix + "head_b"])
    if "head_b" not in shadow and prefix + "ema/head_b" in scalars:
        shadow["head_b"] = f32(scalars[prefix + "ema/head_b"])
    return EmbedderParams(w, s32(scalars[prefix + "temperature"]),
                          s32(scalars[prefix + "ema_decay"]), shadow)


_DEN_SCALARS = ("channels", "width", "state_size", "n_blocks", "t_steps", "sharpness", "attn_w",
                "attn_radius")


def model_entries(model: Model):
    tensors = {"denoiser/" + k: v for k, v in model.denoiser.weights.items()}
    tensors["schedule/alpha"] = model.schedule.alpha
    tensors["stats/mean"] = model.stats.mean
    tensors["stats/std"] = model.stats.std
    et, es = embedder_entries(model.embedder, "tuned/")
    tensors.update(et)
    cfg = model.denoiser.config
    scalars = {"denoiser/" + k: getattr(cfg, k) for k in _DEN_SCALARS}
    scalars["denoiser/scan_mode"] = SCAN_MODES.index(cfg.scan_mode)
    scalars.update(es)
    return tensors, scalars


def model_from(tensors, scalars, codec: CodecParams, axis: str = "z") -> Model:
    kw = {k: s32(scalars["denoiser/" + k]) for k in _DEN_SCALARS}
    for k in ("channels", "width", "state_size", "n_blocks", "t_steps", "attn_radius"):
        kw[k] = int(kw[k])
    kw["scan_mode"] = SCAN_MODES[int(scalars["denoiser/scan_mode"])]
    config = DenoiserConfig(**kw)
    weights = {k[len("denoiser/"):]: f32(v) for k, v in tensors.items() if k.startswith("denoiser/")}
    return Model(codec, embedder_from(tensors, scalars, "tuned/"), DenoiserParams(config, weights),
                 LatentStats(f32(tensors["stats/mean"]), f32(tensors["stats/std"])),
                 NoiseSchedule(f32(tensors["schedule/alpha"])), axis)
