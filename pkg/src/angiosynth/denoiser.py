"""x0-predicting denoiser built from tree-scan blocks, with explicit backprop.

Per block: linear map, + time embedding and positional encoding, depthwise
3x3 conv, conditioned tree scan, cross-slice fusion, layer norm, residual add. Block k and block
n_blocks-1-k are joined by a long skip: the input of the late one is the mean
of the incoming stream and the early one's output, so zeroed residual
branches leave the stream unchanged.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .attention import CrossSliceLayer
from .treescan import ScanParams, tree_scan_backward, tree_scan_forward

LN_EPS = 1e-5


@dataclass
class DenoiserConfig:
    channels: int = 8        # latent channels c
    width: int = 16          # block width, equals the embedder's token dim
    state_size: int = 16     # c_s
    n_blocks: int = 4
    t_steps: int = 50
    sharpness: float = 1.0
    attn_w: float = 1.0
    attn_radius: int = 2
    scan_mode: str = "tree"

    def skip_partner(self, k: int) -> int:
        return self.n_blocks - 1 - k

    def is_late(self, k: int) -> bool:
        return k > self.skip_partner(k)

    def is_early(self, k: int) -> bool:
        return k < self.skip_partner(k)


class DenoiserParams:
    """Named float arrays plus the architecture they belong to."""

    def __init__(self, config: DenoiserConfig, weights: dict):
        self.config = config
        self.weights = weights
        self.validate()

    def validate(self):
        c, d, cs = self.config.channels, self.config.width, self.config.state_size
        expect = {"stem/w": (d, c), "stem/b": (d,), "head/w": (c, d), "head/b": (c,),
                  "time": (self.config.t_steps, d)}
        for k in range(self.config.n_blocks):
            expect.update({
                f"block{k}/lin_w": (d, d), f"block{k}/lin_b": (d,), f"block{k}/conv": (d, 3, 3),
                f"block{k}/A": (cs, cs), f"block{k}/B": (cs, d), f"block{k}/C": (d, cs),
                f"block{k}/D": (cs, d), f"block{k}/ln_scale": (d,), f"block{k}/ln_shift": (d,),
            })
        missing = set(expect) - set(self.weights)
        extra = set(self.weights) - set(expect)
        if missing or extra:
            raise ValueError(f"denoiser weights mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, shape in expect.items():
            if self.weights[name].shape != shape:
                raise ValueError(f"{name}: shape {self.weights[name].shape} != {shape}")
        perm = [self.config.skip_partner(k) for k in range(self.config.n_blocks)]
        if any(perm[p] != k for k, p in enumerate(perm)):
            raise ValueError("skip pairing is not an involution")

    def scan_params(self, k: int) -> ScanParams:
        w = self.weights
        return ScanParams(w[f"block{k}/A"], w[f"block{k}/B"], w[f"block{k}/C"], w[f"block{k}/D"],
                          self.config.sharpness)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.weights.values())

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(DenoiserConfig(**asdict(self.config)),
                              {k: v.copy() for k, v in self.weights.items()})


def init_denoiser(config: DenoiserConfig, seed: int = 0) -> DenoiserParams:
    rng = np.random.default_rng(seed)
    c, d, cs = config.channels, config.width, config.state_size

    def dense(o, i):
        return rng.normal(0, 1 / np.sqrt(i), size=(o, i))

    w = {"stem/w": dense(d, c), "stem/b": np.zeros(d), "head/w": dense(c, d), "head/b": np.zeros(c),
         "time": rng.normal(0, 0.1, size=(config.t_steps, d))}
    for k in range(config.n_blocks):
        conv = np.zeros((d, 3, 3))
        conv[:, 1, 1] = 1.0
        conv += rng.normal(0, 0.1, size=conv.shape)
        w.update({
            f"block{k}/lin_w": dense(d, d), f"block{k}/lin_b": np.zeros(d), f"block{k}/conv": conv,
            f"block{k}/A": dense(cs, cs), f"block{k}/B": 0.5 * dense(cs, d),
            f"block{k}/C": dense(d, cs), f"block{k}/D": dense(cs, d),
            f"block{k}/ln_scale": np.full(d, 0.5), f"block{k}/ln_shift": np.zeros(d),
        })
    return DenoiserParams(config, w)


def identity_denoiser(config: DenoiserConfig) -> DenoiserParams:
    """Zero residual branches with identity stem and head (needs width == channels)."""
    if config.width != config.channels:
        raise ValueError("identity denoiser needs width == channels")
    params = init_denoiser(config)
    w = params.weights
    w["stem/w"] = np.eye(config.width)
    w["head/w"] = np.eye(config.channels)
    for k in range(config.n_blocks):
        w[f"block{k}/ln_scale"] = np.zeros(config.width)
        w[f"block{k}/ln_shift"] = np.zeros(config.width)
    return params


# ---------------------------------------------------------------- layers


def depthwise_conv(x, kernel):
    """x: (S, h, w, d), kernel: (d, 3, 3); zero padded, stride 1."""
    S, h, w, d = x.shape
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros_like(x)
    for dy in range(3):
        for dx in range(3):
            out += kernel[:, dy, dx] * pad[:, dy:dy + h, dx:dx + w, :]
    return out


def depthwise_conv_backward(x, kernel, dout):
    S, h, w, d = x.shape
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    dpad = np.zeros_like(pad)
    dk = np.zeros_like(kernel)
    for dy in range(3):
        for dx in range(3):
            dk[:, dy, dx] = np.einsum("shwd,shwd->d", dout, pad[:, dy:dy + h, dx:dx + w, :])
            dpad[:, dy:dy + h, dx:dx + w, :] += kernel[:, dy, dx] * dout
    return dpad[:, 1:-1, 1:-1, :], dk


def positional_encoding(h: int, w: int, d: int) -> np.ndarray:
    """Fixed 2D sinusoids (h, w, d): first half of the channels encodes the row,
    second half the column, as sin/cos pairs with periods 2, 4, 8, ... tokens."""
    half = d // 2
    out = np.zeros((h, w, d))
    for offset, n, axis in ((0, half, 0), (half, d - half, 1)):
        pos = np.arange((h, w)[axis], dtype=np.float64)
        for k in range(n):
            ang = pos * np.pi / 2.0 ** (k // 2)
            wave = np.sin(ang + np.pi / 2) if k % 2 else np.sin(ang + np.pi / 4)
            out[..., offset + k] = wave[:, None] if axis == 0 else wave[None, :]
    return out


def layer_norm(x, scale, shift):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * scale + shift, (xhat, inv)


def layer_norm_backward(dout, scale, cache):
    xhat, inv = cache
    axes = tuple(range(dout.ndim - 1))
    dscale = np.sum(dout * xhat, axis=axes)
    dshift = np.sum(dout, axis=axes)
    dxhat = dout * scale
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
    return dx, dscale, dshift


# ---------------------------------------------------------------- model


class _Cond:
    def __init__(self, mask, tokens):
        self.mask = mask
        self.tokens = tokens


def denoise_forward(params: DenoiserParams, z_t, t: int, cond=None, alpha=None):
    """Predict z0 for a slice stack z_t (S, h, w, c). Returns (z0_hat, cache).

    ``cond`` carries per-slice mask (S, h, w) and tokens (S, h, w, width).
    ``alpha``, if given, is a fixed (S, S) cross-slice matrix used by every
    block instead of the one computed from pooled hidden states.
    """
    cfg = params.config
    w = params.weights
    z_t = np.asarray(z_t, dtype=np.float64)
    if z_t.ndim != 4 or z_t.shape[-1] != cfg.channels:
        raise ValueError(f"expected (S, h, w, {cfg.channels}) latents, got {z_t.shape}")
    if not 1 <= t <= cfg.t_steps:
        raise ValueError(f"timestep {t} outside [1, {cfg.t_steps}]")
    S, h, wd, _ = z_t.shape
    pos = positional_encoding(h, wd, cfg.width)
    if cond is not None:
        if cond.mask.shape != (S, h, wd) or cond.tokens.shape != (S, h, wd, cfg.width):
            raise ValueError("condition does not match the latent grid or block width")
        masks = cond.mask.reshape(S, -1).mean(axis=1)
    else:
        masks = np.zeros(S)
    if alpha is not None:
        alpha = np.asarray(alpha, dtype=np.float64)
        if alpha.shape != (S, S):
            raise ValueError(f"alpha must be ({S}, {S})")
    attn = CrossSliceLayer(cfg.attn_w, cfg.attn_radius)

    x = z_t @ w["stem/w"].T + w["stem/b"]
    saved = {}
    caches = []
    for k in range(cfg.n_blocks):
        p = f"block{k}/"
        if cfg.is_late(k):
            x = 0.5 * (x + saved[cfg.skip_partner(k)])
        x_in = x
        a = x @ w[p + "lin_w"].T + w[p + "lin_b"] + w["time"][t - 1] + pos
        cv = depthwise_conv(a, w[p + "conv"])
        sp = params.scan_params(k)
        Y, st = tree_scan_forward(cv, cond, sp, mode=cfg.scan_mode)
        Yf = Y.reshape(S, h * wd, -1)
        hid = st.h.reshape(S, h * wd, -1)
        if alpha is None:
            fused, alpha_k, acache = attn.forward(Yf, hid, masks)
        else:
            fused, alpha_k, acache = np.tensordot(alpha, Yf, axes=(1, 0)), alpha, None
        fused = fused.reshape(S, h, wd, -1)
        n, lncache = layer_norm(fused, w[p + "ln_scale"], w[p + "ln_shift"])
        x = x_in + n
        if cfg.is_early(k):
            saved[k] = x
        caches.append((x_in, a, cv, sp, st, acache, alpha_k, lncache))
    out = x @ w["head/w"].T + w["head/b"]
    return out, {"z_t": z_t, "x_final": x, "blocks": caches, "t": t, "attn": attn,
                 "alpha_fixed": alpha is not None, "has_cond": cond is not None}


def denoise_step(z_t, t: int, cond, params: DenoiserParams, alpha=None):
    return denoise_forward(params, z_t, t, cond, alpha)[0]


def denoise_backward(params: DenoiserParams, cache, d_out, scan_weight: float = 0.0):
    """Gradients given dL/d(z0_hat). Returns (weight grads, summed scan loss, cond grads).

    The cond grads are (dL/dM, dL/dT) shaped like the condition, or None when
    the forward pass ran unconditioned.
    """
    cfg = params.config
    w = params.weights
    g = {k: np.zeros_like(v) for k, v in params.weights.items()}
    d_out = np.asarray(d_out, dtype=np.float64)
    x = cache["x_final"]
    g["head/w"] = np.einsum("shwc,shwd->cd", d_out, x)
    g["head/b"] = d_out.sum(axis=(0, 1, 2))
    dx = d_out @ w["head/w"]
    d_saved = {}
    total_scan = 0.0
    t = cache["t"]
    has_cond = cache["has_cond"]
    dM_total = dT_total = None
    for k in reversed(range(cfg.n_blocks)):
        p = f"block{k}/"
        x_in, a, cv, sp, st, acache, alpha_k, lncache = cache["blocks"][k]
        if cfg.is_early(k) and k in d_saved:
            dx = dx + d_saved[k]
        S, h, wd, d = cv.shape
        dn = dx
        dfused, g[p + "ln_scale"], g[p + "ln_shift"] = layer_norm_backward(dn, w[p + "ln_scale"], lncache)
        dfused = dfused.reshape(S, h * wd, d)
        if acache is not None:
            dY, dhid, dmasks = cache["attn"].backward(dfused, acache)
        else:
            dY = np.tensordot(alpha_k.T, dfused, axes=(1, 0))
            dhid = dmasks = None
        sg = tree_scan_backward(st, sp, dY.reshape(S, h, wd, d),
                                None if dhid is None else dhid.reshape(-1, dhid.shape[-1]),
                                scan_weight=scan_weight)
        total_scan += sg.scan_loss
        if has_cond:
            dM_k = sg.M if sg.M is not None else np.zeros((S, h, wd))
            if dmasks is not None:
                dM_k = dM_k + dmasks[:, None, None] / (h * wd)
            dM_total = dM_k if dM_total is None else dM_total + dM_k
            dT_total = sg.T if dT_total is None else dT_total + sg.T
        g[p + "A"], g[p + "B"], g[p + "C"], g[p + "D"] = sg.A, sg.B, sg.C, sg.D
        da, g[p + "conv"] = depthwise_conv_backward(a, w[p + "conv"], sg.X)
        g[p + "lin_w"] = np.einsum("shwo,shwi->oi", da, x_in)
        g[p + "lin_b"] = da.sum(axis=(0, 1, 2))
        g["time"][t - 1] += da.sum(axis=(0, 1, 2))
        dx_in = dx + da @ w[p + "lin_w"]
        if cfg.is_late(k):
            j = cfg.skip_partner(k)
            d_saved[j] = d_saved.get(j, 0) + 0.5 * dx_in
            dx_in = 0.5 * dx_in
        dx = dx_in
    g["stem/w"] = np.einsum("shwd,shwc->dc", dx, cache["z_t"])
    g["stem/b"] = dx.sum(axis=(0, 1, 2))
    return g, total_scan, ((dM_total, dT_total) if has_cond else None)
