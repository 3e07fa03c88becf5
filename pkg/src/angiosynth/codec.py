"""Per-patch linear slice codec standing in for the latent autoencoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class CodecParams:
    encoder: np.ndarray            # (c, p*p)
    decoder: np.ndarray            # (p*p, c)
    patch_size: int
    ema_decay: float = 0.999
    ema_shadow: dict = field(default_factory=dict)

    def __post_init__(self):
        p2 = self.patch_size ** 2
        c = self.encoder.shape[0]
        if self.encoder.shape != (c, p2) or self.decoder.shape != (p2, c):
            raise ValueError(f"inconsistent codec shapes {self.encoder.shape} / {self.decoder.shape}")
        if not 0 <= self.ema_decay <= 1:
            raise ValueError("ema_decay must lie in [0, 1]")
        if not self.ema_shadow:
            self.ema_shadow = {"encoder": self.encoder.copy(), "decoder": self.decoder.copy()}

    @property
    def channels(self) -> int:
        return self.encoder.shape[0]

    def live(self) -> dict:
        return {"encoder": self.encoder, "decoder": self.decoder}

    def shadow_params(self) -> "CodecParams":
        """Codec using the EMA weights, as used at inference."""
        return CodecParams(self.ema_shadow["encoder"].copy(), self.ema_shadow["decoder"].copy(),
                           self.patch_size, self.ema_decay,
                           {k: v.copy() for k, v in self.ema_shadow.items()})


def identity_codec(patch_size: int = 4) -> CodecParams:
    p2 = patch_size ** 2
    return CodecParams(np.eye(p2), np.eye(p2), patch_size)


def ema_update(shadow: dict, live: dict, decay: float) -> dict:
    """shadow <- decay*shadow + (1-decay)*live, elementwise; returns a new dict."""
    if not 0 <= decay <= 1:
        raise ValueError("decay must lie in [0, 1]")
    return {k: decay * shadow[k] + (1 - decay) * live[k] for k in shadow}


def patchify(images: np.ndarray, p: int) -> np.ndarray:
    """(..., H, W) -> (..., H/p, W/p, p*p)."""
    *lead, H, W = images.shape
    if H % p or W % p:
        raise ValueError(f"slice dims {(H, W)} not divisible by patch size {p}")
    x = images.reshape(*lead, H // p, p, W // p, p)
    x = np.moveaxis(x, -3, -2)
    return x.reshape(*lead, H // p, W // p, p * p)


def unpatchify(patches: np.ndarray, p: int) -> np.ndarray:
    *lead, h, w, p2 = patches.shape
    if p2 != p * p:
        raise ValueError(f"patch vector length {p2} != {p}*{p}")
    x = patches.reshape(*lead, h, w, p, p)
    x = np.moveaxis(x, -2, -3)
    return x.reshape(*lead, h * p, w * p)


def encode_slice(slice_, params: CodecParams) -> np.ndarray:
    """Slice (H, W) -> token grid (H/p, W/p, c). Also accepts a leading stack axis."""
    return patchify(np.asarray(slice_, dtype=np.float64), params.patch_size) @ params.encoder.T


def decode_slice(tokens, params: CodecParams) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.shape[-1] != params.channels:
        raise ValueError(f"token channels {tokens.shape[-1]} != codec channels {params.channels}")
    return unpatchify(tokens @ params.decoder.T, params.patch_size)


def reconstruction_mse(patches, enc, dec) -> float:
    r = patches @ enc.T @ dec.T - patches
    return float(np.mean(r * r))


def train_codec(slices, epochs: int = 100, lr: float = 0.5, patch_size: int = 4, channels: int = 8,
                ema_decay: float = 0.999, init: str = "pca", seed: int = 0, history=None) -> CodecParams:
    """Full-batch gradient descent on reconstruction MSE.

    ``init="pca"`` starts from the top principal directions of the (uncentered)
    patch set, which is already the optimum of the linear problem; ``"random"``
    starts from a scaled Gaussian draw. ``history``, if a list, receives the
    training MSE before every epoch and after the last.
    """
    slices = [np.asarray(s, dtype=np.float64) for s in slices]
    if not slices:
        raise ValueError("train_codec needs at least one slice")
    P = np.concatenate([patchify(s, patch_size).reshape(-1, patch_size ** 2) for s in slices])
    p2 = patch_size ** 2
    if not 1 <= channels <= p2:
        raise ValueError(f"channels must lie in [1, {p2}]")

    if init == "pca":
        _, _, vt = np.linalg.svd(P, full_matrices=False)
        enc = vt[:channels].copy()
        dec = enc.T.copy()
    elif init == "random":
        rng = np.random.default_rng(seed)
        enc = rng.normal(0, 1 / np.sqrt(p2), size=(channels, p2))
        dec = rng.normal(0, 1 / np.sqrt(channels), size=(p2, channels))
    else:
        raise ValueError(f"unknown init {init!r}")

    params = CodecParams(enc, dec, patch_size, ema_decay)
    n = P.size
    for _ in range(epochs):
        Z = P @ params.encoder.T
        R = Z @ params.decoder.T - P
        if history is not None:
            history.append(float(np.mean(R * R)))
        dR = 2 * R / n
        g_dec = dR.T @ Z
        g_enc = (dR @ params.decoder).T @ P
        params.encoder = params.encoder - lr * g_enc
        params.decoder = params.decoder - lr * g_dec
        params.ema_shadow = ema_update(params.ema_shadow, params.live(), params.ema_decay)
    if history is not None:
        history.append(reconstruction_mse(P, params.encoder, params.decoder))
    return params
