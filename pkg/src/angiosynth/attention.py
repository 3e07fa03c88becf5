"""Mask-biased windowed attention across neighbouring slices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LEAKY_SLOPE = 0.01


@dataclass
class SliceFeature:
    vector: np.ndarray
    mask: float

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if not np.all(np.isfinite(self.vector)) or np.linalg.norm(self.vector) == 0:
            raise ValueError("slice feature must be finite with nonzero norm")
        if not 0 <= self.mask <= 1:
            raise ValueError(f"slice mask summary must lie in [0, 1], got {self.mask}")


@dataclass
class AttentionMatrix:
    weights: np.ndarray   # (n, n), rows sum to 1
    radius: int


def slice_similarity(h_i, h_j) -> float:
    h_i = np.asarray(h_i, dtype=np.float64)
    h_j = np.asarray(h_j, dtype=np.float64)
    ni, nj = np.linalg.norm(h_i), np.linalg.norm(h_j)
    if ni == 0 or nj == 0:
        raise ValueError("slice similarity of a zero-norm feature")
    return float(np.clip(h_i @ h_j / (ni * nj), -1.0, 1.0))


def leaky_relu(x, slope=LEAKY_SLOPE):
    return np.where(x >= 0, x, slope * x)


def window_mask(n: int, radius: int) -> np.ndarray:
    idx = np.arange(n)
    return np.abs(idx[:, None] - idx[None, :]) <= radius


def _logits(vectors, masks, w):
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0):
        raise ValueError("slice similarity of a zero-norm feature")
    unit = vectors / norms[:, None]
    S = unit @ unit.T
    pre = S + w * np.outer(masks, masks)
    return S, pre, unit, norms


def _softmax_rows(logits, window):
    z = np.where(window, logits, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(window, np.exp(z), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def attention_weights(vectors, masks, w: float = 1.0, radius: int = 2) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    if vectors.ndim != 2 or len(vectors) == 0:
        raise ValueError("need at least one slice feature")
    if radius < 1:
        raise ValueError("window radius must be >= 1")
    _, pre, _, _ = _logits(vectors, masks, w)
    return _softmax_rows(leaky_relu(pre), window_mask(len(vectors), radius))


def cross_slice_weights(features, w: float = 1.0, r: int = 2) -> AttentionMatrix:
    """alpha_ij = softmax over |i - k| <= r of LReLU(S_ik + w * mask_i * mask_k)."""
    features = list(features)
    if not features:
        raise ValueError("cross_slice_weights needs at least one slice")
    vecs = np.stack([f.vector for f in features])
    masks = np.array([f.mask for f in features])
    return AttentionMatrix(attention_weights(vecs, masks, w, r), r)


def apply_cross_slice(grids, alpha) -> np.ndarray:
    """fused_i = sum_j alpha_ij * grid_j over a stack (S, ...)."""
    grids = np.asarray(grids, dtype=np.float64)
    a = alpha.weights if isinstance(alpha, AttentionMatrix) else np.asarray(alpha)
    if a.shape != (grids.shape[0], grids.shape[0]):
        raise ValueError(f"attention {a.shape} does not match {grids.shape[0]} slices")
    return np.tensordot(a, grids, axes=(1, 0))


class CrossSliceLayer:
    """Forward/backward of fusing token grids by attention from pooled hidden states."""

    def __init__(self, w: float = 1.0, radius: int = 2):
        self.w = w
        self.radius = radius

    def forward(self, Y, hidden, masks):
        """Y: (S, L, c) outputs, hidden: (S, L, c_s) states, masks: (S,) mask summaries."""
        pooled = hidden.mean(axis=1)
        S, pre, unit, norms = _logits(pooled, masks, self.w)
        window = window_mask(len(pooled), self.radius)
        alpha = _softmax_rows(leaky_relu(pre), window)
        cache = (Y, hidden.shape, pre, unit, norms, S, alpha, np.asarray(masks, dtype=np.float64))
        return np.tensordot(alpha, Y, axes=(1, 0)), alpha, cache

    def backward(self, d_fused, cache):
        """Returns (dY, d_hidden, d_masks)."""
        Y, hshape, pre, unit, norms, S, alpha, masks = cache
        dY = np.tensordot(alpha.T, d_fused, axes=(1, 0))
        d_alpha = np.tensordot(d_fused, Y, axes=([1, 2], [1, 2]))
        d_logit = alpha * (d_alpha - np.sum(alpha * d_alpha, axis=1, keepdims=True))
        d_pre = d_logit * np.where(pre >= 0, 1.0, LEAKY_SLOPE)
        dS = d_pre + d_pre.T
        d_unit = dS @ unit
        d_pooled = (d_unit - unit * np.sum(unit * d_unit, axis=1, keepdims=True)) / norms[:, None]
        d_hidden = np.broadcast_to(d_pooled[:, None, :] / hshape[1], hshape).copy()
        d_masks = self.w * (dS @ masks)
        return dY, d_hidden, d_masks
