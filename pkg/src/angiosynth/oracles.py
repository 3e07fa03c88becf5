"""Slow reference computations used to cross-check the fast paths.

Nothing here shares code with the code it checks: path products walk
explicit tree paths, spanning trees are enumerated exhaustively, gradients
come from central differences, components from a plain flood fill.
"""

from __future__ import annotations

import itertools
import math
from collections import deque

import numpy as np


def tree_path(parent: np.ndarray, i: int, j: int) -> list:
    """Nodes on the unique path i -> j in a rooted tree given by ``parent``."""
    def ancestors(n):
        out = [n]
        while parent[n] >= 0:
            n = int(parent[n])
            out.append(n)
        return out
    ai, aj = ancestors(i), ancestors(j)
    common = set(ai) & set(aj)
    up = []
    for n in ai:
        up.append(n)
        if n in common:
            lca = n
            break
    down = []
    for n in aj:
        if n == lca:
            break
        down.append(n)
    return up + down[::-1]


def path_product_matrix(parent: np.ndarray, gate: np.ndarray) -> np.ndarray:
    """G[i, j] = product of edge gates along the tree path (gate[n] is edge n--parent)."""
    L = len(parent)
    G = np.ones((L, L))
    for i in range(L):
        for j in range(L):
            path = tree_path(parent, i, j)
            prod = 1.0
            for a, b in zip(path[:-1], path[1:]):
                child = a if parent[a] == b else b
                prod *= gate[child]
            G[i, j] = prod
    return G


def brute_force_aggregate(parent, gate, u) -> np.ndarray:
    """O(L^2) definition of the tree aggregation: h_i = sum_j G(i, j) u_j."""
    return path_product_matrix(np.asarray(parent), np.asarray(gate)) @ np.asarray(u)


def _spans(n_nodes, edge_subset):
    seen = {0}
    adj = [[] for _ in range(n_nodes)]
    for i, j in edge_subset:
        adj[i].append(j)
        adj[j].append(i)
    stack = [0]
    while stack:
        k = stack.pop()
        for m in adj[k]:
            if m not in seen:
                seen.add(m)
                stack.append(m)
    return len(seen) == n_nodes


def enumerate_spanning_trees(n_nodes: int, edges):
    """All spanning trees as tuples of edge indices (exponential; small graphs only).

    Backtracking over edges in index order: an edge is taken only when it joins
    two components, and a branch is abandoned once the untried edges can no
    longer connect the forest. Each spanning tree is produced exactly once.
    """
    edges = [tuple(e) for e in np.asarray(edges).tolist()]
    if n_nodes == 1:
        return [()]
    out = []

    def find(comp, a):
        while comp[a] != a:
            a = comp[a]
        return a

    def walk(k, comp, chosen):
        if len(chosen) == n_nodes - 1:
            out.append(tuple(chosen))
            return
        if k == len(edges) or len(chosen) + len(edges) - k < n_nodes - 1:
            return
        # can the forest plus edges k.. still span everything?
        probe = list(comp)
        for i, j in edges[k:]:
            ri, rj = find(probe, i), find(probe, j)
            if ri != rj:
                probe[ri] = rj
        if len({find(probe, a) for a in range(n_nodes)}) > 1:
            return
        i, j = edges[k]
        ri, rj = find(comp, i), find(comp, j)
        if ri != rj:
            joined = list(comp)
            joined[ri] = rj
            walk(k + 1, joined, chosen + [k])
        walk(k + 1, comp, chosen)

    walk(0, list(range(n_nodes)), [])
    return out


def min_spanning_weight(n_nodes: int, edges, weights) -> float:
    """Smallest total weight over all spanning trees, each total summed exactly (fsum).

    Exhaustive branch and bound over include/exclude decisions. A branch is cut
    only when its partial weight plus the cheapest edges it still needs exceeds
    the best complete tree by more than any rounding slack, so the minimum is
    never pruned away.
    """
    edges = [tuple(e) for e in np.asarray(edges).tolist()]
    weights = [float(x) for x in np.asarray(weights).ravel()]
    if n_nodes == 1:
        return 0.0
    best = [math.inf]

    def find(comp, a):
        while comp[a] != a:
            a = comp[a]
        return a

    def walk(k, comp, chosen):
        need = n_nodes - 1 - len(chosen)
        if need == 0:
            best[0] = min(best[0], math.fsum(weights[c] for c in chosen))
            return
        rest = sorted(weights[k:])
        if len(rest) < need:
            return
        bound = math.fsum([weights[c] for c in chosen] + rest[:need])
        if bound > best[0] + 1e-9:
            return
        probe = list(comp)
        for i, j in edges[k:]:
            ri, rj = find(probe, i), find(probe, j)
            if ri != rj:
                probe[ri] = rj
        if len({find(probe, a) for a in range(n_nodes)}) > 1:
            return
        i, j = edges[k]
        ri, rj = find(comp, i), find(comp, j)
        if ri != rj:
            joined = list(comp)
            joined[ri] = rj
            walk(k + 1, joined, chosen + [k])
        walk(k + 1, comp, chosen)

    walk(0, list(range(n_nodes)), [])
    if best[0] == math.inf:
        raise ValueError("graph is disconnected")
    return best[0]


def random_connected_graph(rng, n_nodes: int, extra_edges: int | None = None):
    """Random spanning path plus extra random edges; weights rounded to force ties sometimes."""
    perm = rng.permutation(n_nodes)
    edges = {tuple(sorted((int(perm[k]), int(perm[k + 1])))) for k in range(n_nodes - 1)}
    all_pairs = [(i, j) for i in range(n_nodes) for j in range(i + 1, n_nodes)]
    extra = rng.integers(0, len(all_pairs) + 1) if extra_edges is None else extra_edges
    for k in rng.permutation(len(all_pairs))[:extra]:
        edges.add(all_pairs[k])
    edges = np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)
    weights = np.round(rng.uniform(0, 2, size=len(edges)), 1)
    return edges, weights


def central_difference(f, x: np.ndarray, step: float = 1e-4, indices=None) -> np.ndarray:
    """Central-difference gradient of scalar f at array x (all entries or ``indices``)."""
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for k in idx:
        orig = flat[k]
        flat[k] = orig + step
        fp = f(x)
        flat[k] = orig - step
        fm = f(x)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2 * step)
    return grad


def flood_fill_components(mask: np.ndarray) -> int:
    """Number of 26-connected foreground components by breadth-first flood fill."""
    mask = np.asarray(mask).astype(bool)
    seen = np.zeros_like(mask)
    shape = mask.shape
    offsets = [d for d in itertools.product((-1, 0, 1), repeat=3) if d != (0, 0, 0)]
    count = 0
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        count += 1
        seen[start] = True
        q = deque([start])
        while q:
            z, y, x = q.popleft()
            for dz, dy, dx in offsets:
                n = (z + dz, y + dy, x + dx)
                if all(0 <= n[k] < shape[k] for k in range(3)) and mask[n] and not seen[n]:
                    seen[n] = True
                    q.append(n)
    return count
