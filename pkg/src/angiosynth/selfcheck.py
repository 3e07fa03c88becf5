"""Quick oracle and gradient checks run by ``angiosynth selfcheck``."""

from __future__ import annotations

import math

import numpy as np

from .attention import attention_weights
from .diffusion import ddim_sample, make_schedule
from .metrics import dice, jaccard, psnr
from .oracles import (brute_force_aggregate, central_difference, min_spanning_weight,
                      random_connected_graph)
from .embedder import ConditionEmbedding
from .treescan import (FeatureGraph, ScanParams, init_scan_params, kruskal_mst, tree_aggregate,
                       tree_scan_backward, tree_scan_forward)


def check_mst(seed=0, n_graphs=20):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_graphs):
        n = int(rng.integers(2, 8))
        edges, weights = random_connected_graph(rng, n)
        tree = kruskal_mst(FeatureGraph(n, edges, weights))
        worst = max(worst, abs(math.fsum(tree.edge_weight.tolist()) - min_spanning_weight(n, edges, weights)))
    return worst == 0.0, f"max |w_mst - w_min| = {worst:.3g}"


def check_scan_oracle(seed=0, n_grids=5):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_grids):
        h, w = (int(x) for x in rng.integers(1, 6, size=2))
        X = rng.normal(size=(h, w, 4))
        params = init_scan_params(4, 3, rng=int(rng.integers(1000)))
        _, state = tree_scan_forward(X, None, params)
        tree = state.trees[0]
        ref = brute_force_aggregate(tree.parent, tree.gate, X.reshape(-1, 4) @ params.B.T)
        got = tree_aggregate(tree, X, params)
        worst = max(worst, float(np.max(np.abs(got - ref)) / max(np.max(np.abs(ref)), 1e-12)))
    return worst < 1e-6, f"max relative error {worst:.3g}"


def check_scan_gradient(seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(3, 3, 4))
    cond = ConditionEmbedding(rng.uniform(0.1, 0.9, size=(3, 3)), rng.normal(size=(3, 3, 4)))
    params = init_scan_params(4, 3, rng=seed)
    R = rng.normal(size=(3, 3, 4))

    def loss_A(A):
        p = ScanParams(A, params.B, params.C, params.D, params.sharpness)
        return float(np.sum(tree_scan_forward(X, cond, p)[0] * R))

    Y, state = tree_scan_forward(X, cond, params)
    grads = tree_scan_backward(state, params, R)
    num = central_difference(loss_A, params.A.copy(), 1e-6)
    keep = np.abs(num) > 1e-8
    rel = np.abs(num - grads.A)[keep] / np.abs(num)[keep]
    worst = float(rel.max()) if rel.size else 0.0
    return worst < 1e-4, f"dA max relative error {worst:.3g}"


def check_sampler(seed=0):
    target = np.random.default_rng(seed).normal(size=(2, 3, 3, 2))
    ok = all(np.array_equal(ddim_sample(lambda z, t: target, target.shape, make_schedule(T)), target)
             for T in (1, 5, 50))
    return ok, "oracle denoiser fixed point for T in 1, 5, 50"


def check_attention(seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(1, 9))
        a = attention_weights(rng.normal(size=(n, 5)), rng.uniform(size=n), rng.uniform(0, 3), 2)
        worst = max(worst, float(np.max(np.abs(a.sum(axis=1) - 1))))
    return worst < 1e-6, f"max |row sum - 1| = {worst:.3g}"


def check_metrics(seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        a = (rng.uniform(size=(4, 4, 4)) < 0.3).astype(float)
        b = (rng.uniform(size=(4, 4, 4)) < 0.3).astype(float)
        j = jaccard(a, b)
        worst = max(worst, abs(dice(a, b) - 2 * j / (1 + j)))
    ok = worst < 1e-9 and abs(psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) - 20.0) < 1e-9
    return ok, f"max |d - 2j/(1+j)| = {worst:.3g}"


CHECKS = {
    "mst-oracle": check_mst,
    "scan-oracle": check_scan_oracle,
    "scan-gradient": check_scan_gradient,
    "sampler-fixed-point": check_sampler,
    "attention-rows": check_attention,
    "metric-identities": check_metrics,
}


def run_all(seed: int = 0):
    """Yields (name, passed, detail) for every check."""
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn(seed)
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        yield name, bool(ok), detail
