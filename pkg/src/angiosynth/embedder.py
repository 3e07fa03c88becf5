"""Conditioning encoder: latent tokens and their pools -> MLP -> (mask M, tokens T).

Trained with InfoNCE between slice-pooled codec latents and slice-pooled
tokens, plus a binary cross-entropy term pulling M toward the downsampled
vessel mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codec import CodecParams, encode_slice, ema_update, patchify
from .optim import Adam
from .volume import extract_slices

PARAM_NAMES = ("w1", "b1", "w2", "b2", "head_w", "head_b", "proj")


@dataclass
class ConditionEmbedding:
    mask: np.ndarray     # (..., h, w) in [0, 1]
    tokens: np.ndarray   # (..., h, w, c_e)

    def __post_init__(self):
        if self.mask.shape != self.tokens.shape[:-1]:
            raise ValueError(f"mask grid {self.mask.shape} != token grid {self.tokens.shape[:-1]}")


@dataclass
class EmbedderParams:
    weights: dict
    temperature: float = 0.07
    ema_decay: float = 0.999
    ema_shadow: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 0 <= self.ema_decay <= 1:
            raise ValueError("ema_decay must lie in [0, 1]")
        w = self.weights
        hidden, c_in = w["w1"].shape
        c_e = w["w2"].shape[0]
        if (c_in % 3 or w["b1"].shape != (hidden,) or w["w2"].shape != (c_e, hidden)
                or w["b2"].shape != (c_e,) or w["head_w"].shape != (c_e,)
                or w["proj"].shape != (c_in // 3, c_e)):
            raise ValueError("inconsistent embedder layer shapes")
        if not self.ema_shadow:
            self.ema_shadow = {k: np.array(v, copy=True) for k, v in w.items()}

    @property
    def embed_dim(self) -> int:
        return self.weights["w2"].shape[0]

    @property
    def latent_channels(self) -> int:
        return self.weights["proj"].shape[0]

    def shadow_params(self) -> "EmbedderParams":
        return EmbedderParams({k: v.copy() for k, v in self.ema_shadow.items()},
                              self.temperature, self.ema_decay,
                              {k: v.copy() for k, v in self.ema_shadow.items()})


def init_embedder(latent_channels: int = 8, embed_dim: int = 16, temperature: float = 0.07,
                  ema_decay: float = 0.999, seed: int = 0) -> EmbedderParams:
    rng = np.random.default_rng(seed)
    c_in = 3 * latent_channels
    hidden = 4 * embed_dim
    w = {
        "w1": rng.normal(0, 1 / np.sqrt(c_in), size=(hidden, c_in)),
        "b1": np.zeros(hidden),
        "w2": rng.normal(0, 1 / np.sqrt(hidden), size=(embed_dim, hidden)),
        "b2": np.zeros(embed_dim),
        "head_w": rng.normal(0, 1 / np.sqrt(embed_dim), size=embed_dim),
        "head_b": np.zeros(()),
        "proj": rng.normal(0, 1 / np.sqrt(embed_dim), size=(latent_channels, embed_dim)),
    }
    return EmbedderParams(w, temperature, ema_decay)


def pool_features(tokens: np.ndarray) -> np.ndarray:
    """concat(3x3 average, 3x3 max) over the token grid, zero padded. (..., h, w, 2c)."""
    tokens = np.asarray(tokens, dtype=np.float64)
    h, w = tokens.shape[-3:-1]
    pad = [(0, 0)] * (tokens.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    padded = np.pad(tokens, pad)
    windows = [padded[..., dy:dy + h, dx:dx + w, :] for dy in range(3) for dx in range(3)]
    stack = np.stack(windows)
    return np.concatenate([stack.mean(axis=0), stack.max(axis=0)], axis=-1)


def token_features(tokens: np.ndarray) -> np.ndarray:
    """Per-token MLP input: the token itself followed by its 3x3 average and max pools."""
    tokens = np.asarray(tokens, dtype=np.float64)
    return np.concatenate([tokens, pool_features(tokens)], axis=-1)


def _sigmoid(x):
    return 0.5 * (1 + np.tanh(0.5 * x))


def _forward(features, w):
    a1 = features @ w["w1"].T + w["b1"]
    z1 = np.tanh(a1)
    T = z1 @ w["w2"].T + w["b2"]
    logit = T @ w["head_w"] + w["head_b"]
    return z1, T, logit


def embed_slice(tokens, params: EmbedderParams) -> ConditionEmbedding:
    """Embed one token grid (h, w, c) or a stack (S, h, w, c) with the given weights."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if not np.all(np.isfinite(tokens)):
        raise ValueError("token grid contains non-finite values")
    _, T, logit = _forward(token_features(tokens), params.weights)
    return ConditionEmbedding(_sigmoid(logit), T)


def cosine_similarity(a, b) -> np.ndarray:
    """Pairwise cosine similarities between rows of ``a`` and rows of ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine similarity of a zero-norm vector")
    return (a / na[:, None]) @ (b / nb[:, None]).T


def infonce_from_similarity(sim: np.ndarray, tau: float) -> float:
    """Mean over rows of -log softmax(sim[i] / tau)[i]."""
    logits = np.asarray(sim, dtype=np.float64) / tau
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return float(np.mean(lse - np.diag(logits)))


def infonce_loss(z_batch, t_batch, tau: float, return_grads: bool = False):
    """InfoNCE with cosine similarity; row i of each batch forms the positive pair.

    With ``return_grads`` also returns (dL/dz, dL/dt).
    """
    z = np.asarray(z_batch, dtype=np.float64)
    t = np.asarray(t_batch, dtype=np.float64)
    if z.shape != t.shape or z.ndim != 2 or z.shape[0] < 2:
        raise ValueError(f"need two matching batches of N >= 2 vectors, got {z.shape}, {t.shape}")
    if tau <= 0:
        raise ValueError("temperature must be > 0")
    S = cosine_similarity(z, t)
    loss = infonce_from_similarity(S, tau)
    if not return_grads:
        return loss
    N = z.shape[0]
    logits = S / tau
    P = np.exp(logits - logits.max(axis=1, keepdims=True))
    P /= P.sum(axis=1, keepdims=True)
    dS = (P - np.eye(N)) / (N * tau)
    zn_norm = np.linalg.norm(z, axis=1, keepdims=True)
    tn_norm = np.linalg.norm(t, axis=1, keepdims=True)
    zn, tn = z / zn_norm, t / tn_norm
    d_zn = dS @ tn
    d_tn = dS.T @ zn
    dz = (d_zn - zn * np.sum(zn * d_zn, axis=1, keepdims=True)) / zn_norm
    dt = (d_tn - tn * np.sum(tn * d_tn, axis=1, keepdims=True)) / tn_norm
    return loss, dz, dt


def _backward(feats, z1, T, w, dT, dlogit):
    dT = dT + dlogit[..., None] * w["head_w"]
    g = {"head_w": dlogit.reshape(-1) @ T.reshape(-1, T.shape[-1]), "head_b": np.asarray(dlogit.sum())}
    dT2 = dT.reshape(-1, T.shape[-1])
    g["w2"] = dT2.T @ z1.reshape(-1, z1.shape[-1])
    g["b2"] = dT2.sum(axis=0)
    da1 = (dT @ w["w2"]) * (1 - z1 ** 2)
    da2 = da1.reshape(-1, da1.shape[-1])
    g["w1"] = da2.T @ feats.reshape(-1, feats.shape[-1])
    g["b1"] = da2.sum(axis=0)
    g["proj"] = np.zeros_like(w["proj"])
    return g


def embed_backward(tokens, w: dict, dM, dT) -> dict:
    """Weight gradients of embed_slice given upstream dL/dM and dL/dT."""
    feats = token_features(tokens)
    z1, T, logit = _forward(feats, w)
    M = _sigmoid(logit)
    return _backward(feats, z1, T, w, np.asarray(dT, dtype=np.float64), dM * M * (1 - M))


def embedder_batch_loss(w: dict, tokens: np.ndarray, mask_target: np.ndarray, tau: float,
                        mask_weight: float = 1.0):
    """Loss and weight gradients for a batch of token grids (N, h, w, c)."""
    feats = token_features(tokens)
    z1, T, logit = _forward(feats, w)
    M = _sigmoid(logit)
    z_pool = tokens.mean(axis=(1, 2))
    T_pool = T.mean(axis=(1, 2))
    t_vec = T_pool @ w["proj"].T
    l_info, _, dt = infonce_loss(z_pool, t_vec, tau, return_grads=True)

    eps = 1e-12
    y = mask_target
    bce = -np.mean(y * np.log(M + eps) + (1 - y) * np.log(1 - M + eps))
    dlogit = mask_weight * (M - y) / M.size

    dT_pool = dt @ w["proj"]
    hw = T.shape[1] * T.shape[2]
    dT = np.broadcast_to(dT_pool[:, None, None, :] / hw, T.shape)
    g = _backward(feats, z1, T, w, dT, dlogit)
    g["proj"] = dt.T @ T_pool
    return l_info + mask_weight * bce, {"infonce": l_info, "bce": float(bce)}, g


def slice_dataset(pairs, codec: CodecParams, axis: str = "z"):
    """(non-angio latent tokens (N, h, w, c), downsampled vessel fraction (N, h, w))."""
    p = codec.patch_size
    toks, masks = [], []
    for pair in pairs:
        na = np.stack(extract_slices(pair.non_angio, axis))
        vm = np.stack(extract_slices(pair.vessel_mask, axis))
        toks.append(encode_slice(na, codec))
        masks.append(patchify(vm.astype(np.float64), p).mean(axis=-1))
    return np.concatenate(toks), np.concatenate(masks)


def train_embedder(pairs, codec: CodecParams, epochs: int = 200, lr: float = 1e-3,
                   tau: float = 0.07, embed_dim: int = 16, ema_decay: float = 0.999,
                   batch_size: int = 32, mask_weight: float = 1.0, seed: int = 0,
                   axis: str = "z", history=None) -> EmbedderParams:
    """Adam on InfoNCE + mask BCE over shuffled slice batches.

    Negatives for each slice are the other slices in its batch. ``history``,
    if a list, receives the mean loss of every epoch.
    """
    if len(pairs) < 2:
        raise ValueError("train_embedder needs at least two pairs")
    tokens, targets = slice_dataset(pairs, codec, axis)
    params = init_embedder(codec.channels, embed_dim, tau, ema_decay, seed)
    rng = np.random.default_rng(seed + 1)
    opt = Adam(params.weights, lr)
    n = tokens.shape[0]
    batch_size = max(2, min(batch_size, n))
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n - 1, batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 2:
                continue
            loss, _, grads = embedder_batch_loss(params.weights, tokens[idx], targets[idx], tau,
                                                 mask_weight)
            opt.step(params.weights, grads)
            params.ema_shadow = ema_update(params.ema_shadow, params.weights, ema_decay)
            losses.append(loss)
        if history is not None:
            history.append(float(np.mean(losses)))
    return params
