"""Noise schedule, forward noising, losses, deterministic sampler, training loop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import CodecParams, encode_slice
from .denoiser import (DenoiserConfig, DenoiserParams, denoise_backward, denoise_forward,
                       init_denoiser)
from .codec import ema_update
from .embedder import EmbedderParams, embed_backward, embed_slice, embedder_batch_loss
from .optim import Adam
from .volume import extract_slices


@dataclass
class NoiseSchedule:
    alpha: np.ndarray   # alpha[t-1] is the signal-retention coefficient of step t

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        if a.ndim != 1 or len(a) < 1:
            raise ValueError("schedule needs at least one step")
        if not (np.all(a > 0) and np.all(a < 1)):
            raise ValueError("schedule coefficients must lie in (0, 1)")
        if np.any(np.diff(a) >= 0):
            raise ValueError("schedule must be strictly decreasing")
        self.alpha = a

    @property
    def steps(self) -> int:
        return len(self.alpha)

    def at(self, t: int) -> float:
        """alpha_t for 1 <= t <= T, with alpha_0 = 1."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.steps:
            raise ValueError(f"timestep {t} outside [1, {self.steps}]")
        return float(self.alpha[t - 1])


@dataclass
class LossWeights:
    info: float = 1.0
    diff: float = 1.0
    scan: float = 0.01

    def __post_init__(self):
        if min(self.info, self.diff, self.scan) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.info == self.diff == self.scan == 0:
            raise ValueError("loss weights must not all be zero")


def make_schedule(t_steps: int, alpha_start: float = 0.999, alpha_end: float = 0.01) -> NoiseSchedule:
    """Geometric interpolation from alpha_start down to alpha_end."""
    if t_steps < 1:
        raise ValueError("t_steps must be >= 1")
    if not 1 > alpha_start > alpha_end > 0:
        raise ValueError("need 1 > alpha_start > alpha_end > 0")
    if t_steps == 1:
        return NoiseSchedule(np.array([alpha_start]))
    frac = np.arange(t_steps) / (t_steps - 1)
    return NoiseSchedule(alpha_start * (alpha_end / alpha_start) ** frac)


def forward_diffuse(z0, t: int, eps, schedule: NoiseSchedule) -> np.ndarray:
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"latent {z0.shape} and noise {eps.shape} differ in shape")
    if not 1 <= t <= schedule.steps:
        raise ValueError(f"timestep {t} outside [1, {schedule.steps}]")
    a = schedule.at(t)
    return np.sqrt(a) * z0 + np.sqrt(1 - a) * eps


def diffusion_loss(z0_hat, z0) -> float:
    z0_hat = np.asarray(z0_hat, dtype=np.float64)
    z0 = np.asarray(z0, dtype=np.float64)
    if z0_hat.shape != z0.shape:
        raise ValueError("shape mismatch")
    return float(np.mean((z0_hat - z0) ** 2))


def total_loss(l_info: float, l_diff: float, l_scan: float, weights: LossWeights) -> float:
    return weights.info * l_info + weights.diff * l_diff + weights.scan * l_scan


def ddim_sample(denoise_fn, shape, schedule: NoiseSchedule, seed: int = 0) -> np.ndarray:
    """Deterministic reverse process for an x0-predicting ``denoise_fn(z_t, t)``."""
    rng = np.random.default_rng(seed)
    z = rng.normal(size=shape)
    for t in range(schedule.steps, 0, -1):
        z0_hat = np.asarray(denoise_fn(z, t), dtype=np.float64)
        if t == 1:
            return z0_hat
        a_t = schedule.at(t)
        a_prev = schedule.at(t - 1)
        eps_hat = (z - np.sqrt(a_t) * z0_hat) / np.sqrt(1 - a_t)
        z = np.sqrt(a_prev) * z0_hat + np.sqrt(1 - a_prev) * eps_hat
    return z


def sample(cond, schedule: NoiseSchedule, params: DenoiserParams, seed: int = 0, alpha=None):
    """Generate a normalized latent slice stack shaped like ``cond``'s grid."""
    if not params.is_finite():
        raise ValueError("denoiser parameters contain NaN or inf")
    if schedule.steps != params.config.t_steps:
        raise ValueError("schedule length does not match the denoiser's time table")
    shape = cond.mask.shape + (params.config.channels,)
    return ddim_sample(lambda z, t: denoise_forward(params, z, t, cond, alpha)[0],
                       shape, schedule, seed)


# ---------------------------------------------------------------- training


@dataclass
class LatentStats:
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, z):
        return (z - self.mean) / self.std

    def denormalize(self, z):
        return z * self.std + self.mean


def volume_latents(volume, codec: CodecParams, axis: str = "z") -> np.ndarray:
    return encode_slice(np.stack(extract_slices(volume, axis)), codec)


def condition_for(non_angio_latents, embedder: EmbedderParams):
    return embed_slice(non_angio_latents, embedder)


def latent_stats(latents) -> LatentStats:
    flat = np.concatenate([z.reshape(-1, z.shape[-1]) for z in latents])
    std = flat.std(axis=0)
    return LatentStats(flat.mean(axis=0), np.where(std > 1e-8, std, 1.0))


def train_diffusion(pairs, codec: CodecParams, embedder: EmbedderParams, schedule: NoiseSchedule,
                    weights: LossWeights | None = None, steps: int = 2000, lr: float = 2e-3,
                    seed: int = 0, config: DenoiserConfig | None = None, axis: str = "z",
                    history=None, tune_embedder: bool = True):
    """Adam on the weighted loss over randomly drawn (volume, t, noise) triples.

    With ``tune_embedder`` the embedder is trained jointly: it receives the
    denoising gradient through (M, T) plus the weighted InfoNCE gradient, and
    its EMA shadow is advanced every step. Otherwise it stays frozen and the
    InfoNCE term is a constant.

    Returns (params, latent stats, embedder). ``history``, if a list, receives
    the total loss of every step.
    """
    weights = weights or LossWeights()
    if not pairs:
        raise ValueError("train_diffusion needs at least one pair")
    dims = pairs[0].angio.dims
    if any(p.angio.dims != dims or p.non_angio.dims != dims for p in pairs):
        raise ValueError("all training pairs must share dims")
    config = config or DenoiserConfig(channels=codec.channels, width=embedder.embed_dim,
                                      t_steps=schedule.steps)
    if config.width != embedder.embed_dim or config.channels != codec.channels:
        raise ValueError("denoiser width/channels must match embedder dim / codec channels")
    if config.t_steps != schedule.steps:
        raise ValueError("denoiser time table must match the schedule length")

    targets = [volume_latents(p.angio, codec, axis) for p in pairs]
    sources = [volume_latents(p.non_angio, codec, axis) for p in pairs]
    stats = latent_stats(targets)
    targets = [stats.normalize(z) for z in targets]
    embedder = EmbedderParams({k: v.copy() for k, v in embedder.weights.items()},
                              embedder.temperature, embedder.ema_decay,
                              {k: v.copy() for k, v in embedder.ema_shadow.items()})
    no_mask = np.zeros(sources[0].shape[:-1])
    tau = embedder.temperature

    def info_term(i):
        loss, _, g = embedder_batch_loss(embedder.weights, sources[i], no_mask, tau, mask_weight=0.0)
        return loss, g

    if not tune_embedder:
        conds = [condition_for(z, embedder) for z in sources]
        l_info_fixed = float(np.mean([info_term(i)[0] for i in range(len(pairs))]))

    params = init_denoiser(config, seed)
    opt = Adam(params.weights, lr)
    emb_opt = Adam(embedder.weights, lr) if tune_embedder else None
    rng = np.random.default_rng(seed + 7)
    for _ in range(steps):
        i = int(rng.integers(len(pairs)))
        t = int(rng.integers(1, schedule.steps + 1))
        z0 = targets[i]
        eps = rng.normal(size=z0.shape)
        z_t = forward_diffuse(z0, t, eps, schedule)
        cond = condition_for(sources[i], embedder) if tune_embedder else conds[i]
        out, cache = denoise_forward(params, z_t, t, cond)
        l_diff = diffusion_loss(out, z0)
        d_out = weights.diff * 2 * (out - z0) / out.size
        grads, l_scan, d_cond = denoise_backward(params, cache, d_out, scan_weight=weights.scan)
        if tune_embedder:
            l_info, g_info = info_term(i)
            g_emb = embed_backward(sources[i], embedder.weights, *d_cond)
            g_emb = {k: g_emb[k] + weights.info * g_info[k] for k in g_emb}
        else:
            l_info = l_info_fixed
        if history is not None:
            history.append(total_loss(l_info, l_diff, l_scan, weights))
        opt.step(params.weights, grads)
        if tune_embedder:
            emb_opt.step(embedder.weights, g_emb)
            embedder.ema_shadow = ema_update(embedder.ema_shadow, embedder.weights, embedder.ema_decay)
    params.weights = {k: v.astype(np.float32).astype(np.float64) for k, v in params.weights.items()}
    return params, stats, embedder
