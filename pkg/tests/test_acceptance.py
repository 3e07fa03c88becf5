"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from angiosynth import pipeline
from angiosynth.attention import SliceFeature, attention_weights, cross_slice_weights
from angiosynth.checkpoint import to_bytes
from angiosynth.config import RunConfig
from angiosynth.denoiser import DenoiserConfig, denoise_backward, denoise_forward, init_denoiser
from angiosynth.diffusion import (ddim_sample, diffusion_loss, forward_diffuse, make_schedule)
from angiosynth.embedder import ConditionEmbedding
from angiosynth.metrics import (connectivity_score, dice, jaccard, psnr, segment_vessels, ssim)
from angiosynth.oracles import (brute_force_aggregate, central_difference, min_spanning_weight,
                                random_connected_graph)
from angiosynth.treescan import (FeatureGraph, ScanParams, init_scan_params, kruskal_mst,
                                 tree_aggregate, tree_scan_backward, tree_scan_forward)
from angiosynth.volume import to_bytes as vvol_bytes

# criterion 7 training budget, shared by the tree model and the identity ablation
C7_STEPS = 2000
C7_LR = 2e-3


def _relerr(num, ana):
    keep = np.abs(num) > 1e-8
    if not keep.any():
        return 0.0
    return float(np.max(np.abs(num - ana)[keep] / np.abs(num)[keep]))


def test_criterion_1_mst_oracle(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(100):
        n = int(rng.integers(2, 9))
        edges, weights = random_connected_graph(rng, n)
        tree = kruskal_mst(FeatureGraph(n, edges, weights))
        if math.fsum(tree.edge_weight.tolist()) != min_spanning_weight(n, edges, weights):
            mismatches += 1
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and dt < 10
    criterion(1, ok, f"MST oracle: {mismatches}/100 mismatches, {dt:.2f} s")
    assert ok


def test_criterion_2_scan_oracle(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for k in range(20):
        h, w = (int(x) for x in rng.integers(1, 9, size=2))
        if k == 0:
            h = w = 8
        c = int(rng.integers(1, 5))
        X = rng.normal(size=(h, w, c))
        params = init_scan_params(c, int(rng.integers(1, 5)), rng=int(rng.integers(10 ** 6)))
        _, state = tree_scan_forward(X, None, params)
        tree = state.trees[0]
        ref = brute_force_aggregate(tree.parent, tree.gate, X.reshape(-1, c) @ params.B.T)
        got = tree_aggregate(tree, X, params)
        worst = max(worst, float(np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1e-12))))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-6 and dt < 10
    criterion(2, ok, f"scan vs path-product oracle: max rel err {worst:.2e}, {dt:.2f} s")
    assert ok


def _kernel_gradient_error(rng):
    X, T = rng.normal(size=(2, 2, 3, 3, 3))
    M = rng.uniform(0.1, 0.9, size=(2, 3, 3))
    p = init_scan_params(3, 4, rng=int(rng.integers(1000)))
    R = rng.normal(size=X.shape)

    def loss(X=X, T=T, M=M, p=p):
        return float(np.sum(R * tree_scan_forward(X, ConditionEmbedding(M, T), p)[0]))

    _, state = tree_scan_forward(X, ConditionEmbedding(M, T), p)
    g = tree_scan_backward(state, p, R)
    errs = [_relerr(central_difference(lambda a: loss(X=a), X, 1e-6), g.X),
            _relerr(central_difference(lambda a: loss(T=a), T, 1e-6), g.T),
            _relerr(central_difference(lambda a: loss(M=a), M, 1e-6), g.M)]
    for name in "ABCD":
        def f(a, name=name):
            kw = {k: getattr(p, k) for k in "ABCD"}
            kw[name] = a
            return loss(p=ScanParams(**kw, sharpness=p.sharpness))
        errs.append(_relerr(central_difference(f, getattr(p, name).copy(), 1e-6), getattr(g, name)))
    return max(errs)


def _model_gradient_error(rng):
    cfg = DenoiserConfig(channels=2, width=3, state_size=2, n_blocks=2, t_steps=3, attn_radius=1)
    p = init_denoiser(cfg, seed=int(rng.integers(1000)))
    z, z0 = rng.normal(size=(2, 3, 2, 2, 2))
    cond = ConditionEmbedding(rng.uniform(0.1, 0.9, size=(3, 2, 2)), rng.normal(size=(3, 2, 2, 3)))
    out, cache = denoise_forward(p, z, 2, cond)
    grads = denoise_backward(p, cache, 2 * (out - z0) / out.size)[0]
    names = sorted(p.weights)
    worst, checked = 0.0, 0
    while checked < 20:
        name = names[int(rng.integers(len(names)))]
        arr = p.weights[name]
        idx = tuple(int(rng.integers(n)) for n in arr.shape)
        orig = arr[idx]
        vals = []
        for h in (1e-6, -1e-6):
            arr[idx] = orig + h
            vals.append(diffusion_loss(denoise_forward(p, z, 2, cond)[0], z0))
        arr[idx] = orig
        num = (vals[0] - vals[1]) / 2e-6
        if abs(num) < 1e-8:
            continue
        checked += 1
        worst = max(worst, abs(num - grads[name][idx]) / abs(num))
    return worst


def test_criterion_3_gradients(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    kernel = max(_kernel_gradient_error(rng) for _ in range(3))
    model = _model_gradient_error(rng)
    dt = time.perf_counter() - t0
    ok = kernel < 1e-4 and model < 1e-3 and dt < 60
    criterion(3, ok, f"gradients: kernel max rel err {kernel:.2e}, full model {model:.2e}, {dt:.1f} s")
    assert ok


def test_criterion_4_diffusion_algebra(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    sched = make_schedule(50)
    z0 = rng.normal(size=10_000)
    z0 = (z0 - z0.mean()) / z0.std()
    dev = max(abs(forward_diffuse(z0, t, rng.normal(size=z0.shape), sched).var() - 1.0)
              for t in (1, 10, 25, 40, 50))
    exact = True
    for T in (1, 5, 50):
        g = rng.normal(size=(3, 4, 4, 2))
        exact &= bool(np.array_equal(ddim_sample(lambda z, t: g, g.shape, make_schedule(T), seed=T), g))
    dt = time.perf_counter() - t0
    ok = dev < 0.05 and exact and dt < 10
    criterion(4, ok, f"diffusion algebra: max variance deviation {dev:.3%}, "
                     f"sampler fixed point exact={exact}, {dt:.2f} s")
    assert ok


def test_criterion_5_attention(criterion):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(1, 12))
        feats = [SliceFeature(rng.normal(size=6), float(rng.uniform())) for _ in range(n)]
        a = cross_slice_weights(feats, w=float(rng.uniform(-3, 3)), r=int(rng.integers(1, 5))).weights
        worst = max(worst, float(np.max(np.abs(a.sum(axis=1) - 1))))
    h = np.array([[1.0, 0.0], [0.5, math.sqrt(0.75)]])
    a = attention_weights(h, np.ones(2), 0.2, 1)
    hand = math.exp(1.2) / (math.exp(1.2) + math.exp(0.7))
    hand_err = abs(a[0, 0] - hand)
    ok = worst <= 1e-6 and hand_err <= 1e-9
    criterion(5, ok, f"attention: max |row sum - 1| {worst:.1e}, 2-slice hand case err {hand_err:.1e}")
    assert ok


def test_criterion_6_metrics(criterion):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        p, q = rng.uniform(0.05, 0.95, size=2)
        a = (rng.uniform(size=(6, 6, 6)) < p).astype(float)
        b = (rng.uniform(size=(6, 6, 6)) < q).astype(float)
        j = jaccard(a, b)
        worst = max(worst, abs(dice(a, b) - 2 * j / (1 + j)))
    p20 = psnr(np.zeros((16, 16)), np.full((16, 16), 0.1))
    img = rng.uniform(size=(16, 16))
    s1 = ssim(img, img)
    ok = worst <= 1e-9 and abs(p20 - 20.0) < 1e-9 and abs(s1 - 1.0) < 1e-12
    criterion(6, ok, f"metrics: max |d - 2j/(1+j)| {worst:.1e}, PSNR case {p20:.6f} dB, SSIM identity {s1:.12f}")
    assert ok


# ---------------------------------------------------------------- criterion 7


@pytest.fixture(scope="module")
def desk_run():
    cfg = RunConfig(diffusion_steps=C7_STEPS, diffusion_lr=C7_LR).validate()
    t0 = time.perf_counter()
    train = pipeline.make_pairs(cfg, 8)
    held = pipeline.make_pairs(cfg, 2, offset=1000)
    out = {"cfg": cfg, "held": held}
    for mode in ("tree", "identity"):
        model = pipeline.train_all(cfg, train, mode)
        out[mode] = model
        out[mode + "_synth"] = [pipeline.synthesize(model, q.non_angio, cfg.seed) for q in held]
    out["seconds"] = time.perf_counter() - t0
    return out


def test_criterion_7_desk_synthesis(criterion, desk_run):
    held = desk_run["held"]
    rows, ok = [], desk_run["seconds"] < 30 * 60
    for i, q in enumerate(held):
        tree, ident = desk_run["tree_synth"][i], desk_run["identity_synth"][i]
        base = psnr(q.non_angio.voxels, q.angio.voxels)
        got = psnr(tree.voxels, q.angio.voxels)
        c_tree = connectivity_score(segment_vessels(tree))
        c_id = connectivity_score(segment_vessels(ident))
        ok &= got >= base + 3.0 and c_tree >= c_id
        rows.append(f"vol{i}: psnr {got:.2f} vs input {base:.2f} (+{got - base:.2f} dB), "
                    f"connectivity tree {c_tree:.3f} vs identity {c_id:.3f}")
    criterion(7, ok, "desk synthesis: " + "; ".join(rows) + f"; {desk_run['seconds'] / 60:.1f} min")
    assert ok


def test_desk_training_loss_decreases(desk_run):
    h = desk_run["tree"].history["diffusion"]
    k = len(h) // 10
    assert np.mean(h[-k:]) < np.mean(h[:k])


# ---------------------------------------------------------------- criterion 8


def _small_cfg():
    return RunConfig(dims=(16, 16, 16), n_pairs=3, codec_epochs=3, embedder_epochs=4,
                     diffusion_steps=15, t_steps=5, n_blocks=2, state_size=4, embed_dim=6,
                     latent_channels=4, seed=11).validate()


def _stage_bytes():
    cfg = _small_cfg()
    pairs = pipeline.make_pairs(cfg)
    out = {"phantom": b"".join(vvol_bytes(v) for p in pairs for v in (p.non_angio, p.angio, p.vessel_mask))}
    codec = pipeline.run_codec(cfg, pairs)
    out["codec"] = to_bytes(*pipeline.codec_entries(codec))
    emb = pipeline.run_embedder(cfg, pairs, codec)
    out["embedder"] = to_bytes(*pipeline.embedder_entries(emb))
    model = pipeline.run_diffusion(cfg, pairs, codec, emb)
    out["diffusion"] = to_bytes(*pipeline.model_entries(model))
    out["synthesize"] = vvol_bytes(pipeline.synthesize(model, pairs[0].non_angio, cfg.seed))
    return out


def test_criterion_8_determinism(criterion):
    a, b = _stage_bytes(), _stage_bytes()
    same = {k: a[k] == b[k] for k in a}
    ok = all(same.values())
    criterion(8, ok, "determinism: " + ", ".join(f"{k} {'identical' if v else 'DIFFERS'}"
                                                 for k, v in same.items()))
    assert ok
