"""Tree state-space scan over a token grid.

A 4-connected feature graph is pruned to its minimum spanning tree; every
node then aggregates the input-projected states of *all* nodes, each weighted
by the product of edge gates along the connecting tree path. The two-pass
dynamic program (leaves to root, then root to leaves) does this in linear
time. Because the path-product matrix is symmetric, the backward pass runs
the very same DP over the incoming gradients.
"""

from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass, field

import numpy as np

MASK_FLOOR = 0.1


class StaleCacheError(RuntimeError):
    """Backward called with parameters or trees that changed after the forward."""


class ZeroNormTokenError(ValueError):
    def __init__(self, index):
        super().__init__(f"token {index} has zero norm; cosine distance undefined")
        self.index = index


@dataclass
class FeatureGraph:
    n_nodes: int
    edges: np.ndarray      # (E, 2) with i < j, lexicographically sorted
    weights: np.ndarray    # (E,) cosine distances in [0, 2]
    grid: tuple | None = None


@dataclass
class SpanningTree:
    n_nodes: int
    parent: np.ndarray        # (L,), -1 at the root
    children: list
    order: np.ndarray         # root-first BFS order; reversed it visits children before parents
    depth: np.ndarray
    edge_weight: np.ndarray   # weight of the edge to the parent (0 at root)
    gate: np.ndarray          # gate of the edge to the parent (1 at root)
    root: int = 0

    @property
    def edges(self) -> np.ndarray:
        nodes = np.flatnonzero(self.parent >= 0)
        return np.stack([nodes, self.parent[nodes]], axis=1)

    def traversal(self) -> np.ndarray:
        """Leaf-to-root sequence."""
        return self.order[::-1]

    def levels(self) -> list:
        return [np.flatnonzero(self.depth == d) for d in range(int(self.depth.max()) + 1)]


@dataclass
class ScanParams:
    A: np.ndarray   # (c_s, c_s)
    B: np.ndarray   # (c_s, c)
    C: np.ndarray   # (c, c_s)
    D: np.ndarray   # (c_s, c)
    sharpness: float = 1.0

    def __post_init__(self):
        c_s, c = self.B.shape
        if self.A.shape != (c_s, c_s) or self.C.shape != (c, c_s) or self.D.shape != (c_s, c):
            raise ValueError(f"inconsistent scan shapes A{self.A.shape} B{self.B.shape} "
                             f"C{self.C.shape} D{self.D.shape}")
        if not self.sharpness > 0:
            raise ValueError("gate sharpness must be > 0")
        for m in (self.A, self.B, self.C, self.D):
            if not np.all(np.isfinite(m)):
                raise ValueError("scan parameters must be finite")

    @property
    def channels(self):
        return self.B.shape[1]

    @property
    def state_size(self):
        return self.B.shape[0]

    def fingerprint(self) -> str:
        h = hashlib.sha1()
        for m in (self.A, self.B, self.C, self.D):
            h.update(np.ascontiguousarray(m, dtype=np.float64).tobytes())
        h.update(np.float64(self.sharpness).tobytes())
        return h.hexdigest()


def init_scan_params(channels: int, state_size: int | None = None, sharpness: float = 1.0,
                     rng=None, scale: float = 1.0) -> ScanParams:
    rng = np.random.default_rng(rng)
    c_s = channels if state_size is None else state_size
    return ScanParams(
        A=scale * rng.normal(0, 1 / np.sqrt(c_s), size=(c_s, c_s)),
        B=scale * rng.normal(0, 1 / np.sqrt(channels), size=(c_s, channels)),
        C=scale * rng.normal(0, 1 / np.sqrt(c_s), size=(channels, c_s)),
        D=scale * rng.normal(0, 1 / np.sqrt(channels), size=(c_s, channels)),
        sharpness=sharpness,
    )


# ---------------------------------------------------------------- graph + MST


def grid_edges(h: int, w: int) -> np.ndarray:
    """4-neighbour edges (i, j), i < j, in lexicographic order."""
    idx = np.arange(h * w).reshape(h, w)
    right = np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], axis=1)
    down = np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], axis=1)
    e = np.concatenate([right, down])
    return e[np.lexsort((e[:, 1], e[:, 0]))]


def cosine_distance_edges(feats: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """1 - cos(x_i, x_j) along the last axis; ``feats`` is (..., L, c)."""
    norms = np.linalg.norm(feats, axis=-1)
    if np.any(norms == 0):
        bad = np.argwhere(norms == 0)[0]
        raise ZeroNormTokenError(tuple(int(b) for b in bad))
    unit = feats / norms[..., None]
    cos = np.sum(unit[..., edges[:, 0], :] * unit[..., edges[:, 1], :], axis=-1)
    return np.clip(1.0 - cos, 0.0, 2.0)


def feature_graph(feats: np.ndarray, edges: np.ndarray, grid=None) -> FeatureGraph:
    feats = np.asarray(feats, dtype=np.float64)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    edges = np.sort(edges, axis=1)
    edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]
    return FeatureGraph(feats.shape[0], edges, cosine_distance_edges(feats, edges), grid)


def build_grid_graph(X: np.ndarray) -> FeatureGraph:
    """Graph over an (h, w, c) token grid with cosine-distance edge weights."""
    X = np.asarray(X, dtype=np.float64)
    h, w, c = X.shape
    return feature_graph(X.reshape(h * w, c), grid_edges(h, w), grid=(h, w))


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        return True


def kruskal_edges(n_nodes: int, edges: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Indices of MST edges; ties go to the lexicographically smaller (i, j)."""
    order = np.lexsort((edges[:, 1], edges[:, 0], weights))
    uf = UnionFind(n_nodes)
    chosen = []
    ei, ej = edges[:, 0].tolist(), edges[:, 1].tolist()
    for k in order.tolist():
        if uf.union(ei[k], ej[k]):
            chosen.append(k)
            if len(chosen) == n_nodes - 1:
                break
    if len(chosen) != n_nodes - 1:
        raise ValueError("graph is disconnected; no spanning tree exists")
    return np.asarray(chosen, dtype=np.int64)


def rooted_tree(n_nodes: int, tree_edges: np.ndarray, tree_weights: np.ndarray,
                sharpness: float = 1.0, root: int = 0) -> SpanningTree:
    adj = [[] for _ in range(n_nodes)]
    for (i, j), wgt in zip(tree_edges.tolist(), np.asarray(tree_weights).tolist()):
        adj[i].append((j, wgt))
        adj[j].append((i, wgt))
    parent = np.full(n_nodes, -1, dtype=np.int64)
    depth = np.zeros(n_nodes, dtype=np.int64)
    ew = np.zeros(n_nodes)
    children = [[] for _ in range(n_nodes)]
    seen = [False] * n_nodes
    seen[root] = True
    order = []
    queue = deque([root])
    while queue:
        i = queue.popleft()
        order.append(i)
        for j, wgt in sorted(adj[i]):
            if not seen[j]:
                seen[j] = True
                parent[j] = i
                depth[j] = depth[i] + 1
                ew[j] = wgt
                children[i].append(j)
                queue.append(j)
    if len(order) != n_nodes:
        raise ValueError("edges do not span all nodes")
    gate = np.exp(-sharpness * ew)
    gate[root] = 1.0
    return SpanningTree(n_nodes, parent, children, np.asarray(order), depth, ew, gate, root)


def kruskal_mst(graph: FeatureGraph, sharpness: float = 1.0) -> SpanningTree:
    """Minimum spanning tree rooted at node 0, gates exp(-sharpness * weight)."""
    if graph.n_nodes == 1:
        return rooted_tree(1, np.zeros((0, 2), dtype=np.int64), np.zeros(0), sharpness)
    k = kruskal_edges(graph.n_nodes, graph.edges, graph.weights)
    return rooted_tree(graph.n_nodes, graph.edges[k], graph.weights[k], sharpness)


def dump_tree(tree: SpanningTree) -> str:
    """One ``i j weight gate`` line per tree edge (child, parent)."""
    lines = []
    for i in tree.order[1:]:
        lines.append(f"{int(i)} {int(tree.parent[i])} {float(tree.edge_weight[i])!r} "
                     f"{float(tree.gate[i])!r}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_tree(text: str, n_nodes: int, root: int = 0) -> SpanningTree:
    """Inverse of :func:`dump_tree` (for the same root)."""
    rows = [ln.split() for ln in text.splitlines() if ln.strip()]
    edges = np.array([[int(r[0]), int(r[1])] for r in rows], dtype=np.int64).reshape(-1, 2)
    weights = np.array([float(r[2]) for r in rows])
    gates = {frozenset((int(r[0]), int(r[1]))): float(r[3]) for r in rows}
    tree = rooted_tree(n_nodes, edges, weights, 1.0, root)
    for child in np.flatnonzero(tree.parent >= 0):
        tree.gate[child] = gates[frozenset((int(child), int(tree.parent[child])))]
    return tree

# ---------------------------------------------------------------- batched DP


@dataclass
class TreeBatch:
    """Several trees laid out over one flat node axis."""
    parent: np.ndarray   # global parent index, -1 at roots
    gate: np.ndarray
    levels: list         # levels[d] = global ids of nodes at depth d

    @classmethod
    def from_trees(cls, trees, n_nodes: int):
        parents, gates, by_depth = [], [], {}
        for s, t in enumerate(trees):
            off = s * n_nodes
            parents.append(np.where(t.parent >= 0, t.parent + off, -1))
            gates.append(t.gate)
            for d in range(1, int(t.depth.max()) + 1):
                by_depth.setdefault(d, []).append(np.flatnonzero(t.depth == d) + off)
        levels = [np.concatenate(by_depth[d]) for d in sorted(by_depth)]
        return cls(np.concatenate(parents), np.concatenate(gates), levels)


def upward(u: np.ndarray, parent: np.ndarray, gate: np.ndarray, levels) -> np.ndarray:
    """a_i = u_i + sum over children c of gate_c * a_c (subtree aggregate)."""
    a = np.array(u, dtype=np.float64, copy=True)
    for nodes in reversed(levels):
        np.add.at(a, parent[nodes], gate[nodes, None] * a[nodes])
    return a


def downward(a: np.ndarray, parent: np.ndarray, gate: np.ndarray, levels) -> np.ndarray:
    """h_i = a_i + gate_i * (h_par - gate_i * a_i): adds everything outside the subtree."""
    h = np.array(a, copy=True)
    for nodes in levels:
        g = gate[nodes, None]
        h[nodes] = a[nodes] + g * (h[parent[nodes]] - g * a[nodes])
    return h


def aggregate(u: np.ndarray, batch: TreeBatch):
    """All-pairs path-product aggregation. Returns (h, upward partials)."""
    a = upward(u, batch.parent, batch.gate, batch.levels)
    return downward(a, batch.parent, batch.gate, batch.levels), a


def gate_gradient(a_u, h_u, a_r, h_r, batch: TreeBatch) -> np.ndarray:
    """d/d gate_n of sum_i r_i . (G u)_i, for every non-root node n.

    The edge n--parent splits the tree; paths crossing it pick up one factor
    of its gate, so the derivative pairs the subtree aggregate on one side
    with the outside aggregate on the other, in both directions.
    """
    dg = np.zeros(len(batch.parent))
    nodes = np.flatnonzero(batch.parent >= 0)
    p = batch.parent[nodes]
    g = batch.gate[nodes, None]
    out_u = h_u[p] - g * a_u[nodes]
    out_r = h_r[p] - g * a_r[nodes]
    dg[nodes] = np.sum(a_r[nodes] * out_u, axis=1) + np.sum(a_u[nodes] * out_r, axis=1)
    return dg


def tree_aggregate(tree: SpanningTree, X: np.ndarray, params: ScanParams) -> np.ndarray:
    """h[i] = sum_j G(i, j) B x_j with G the path product of tree gates. X is (L, c)."""
    X = np.asarray(X, dtype=np.float64).reshape(tree.n_nodes, -1)
    if X.shape[1] != params.channels:
        raise ValueError(f"token channels {X.shape[1]} != scan channels {params.channels}")
    batch = TreeBatch.from_trees([tree], tree.n_nodes)
    return aggregate(X @ params.B.T, batch)[0]


# ---------------------------------------------------------------- forward / backward


@dataclass
class ScanState:
    grid: tuple
    lead_shape: tuple
    mode: str
    feats: np.ndarray          # (N, c) fused input x + T, N = S * L
    u: np.ndarray              # (N, c_s)
    a: np.ndarray              # upward partials of u
    h: np.ndarray              # (N, c_s) hidden states
    z: np.ndarray              # (N, c_s) A h + D x
    trees: list = field(default_factory=list)
    batch: TreeBatch | None = None
    base_gate: np.ndarray | None = None
    mask_factor: np.ndarray | None = None
    mask: np.ndarray | None = None
    edge_weight: np.ndarray | None = None
    has_cond: bool = False
    fingerprint: str = ""
    tree_signature: str = ""
    eta: np.ndarray | None = None


@dataclass
class ScanGrads:
    X: np.ndarray
    T: np.ndarray | None
    M: np.ndarray | None
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    sharpness: float
    eta: np.ndarray
    scan_loss: float = 0.0

    def params(self) -> dict:
        return {"A": self.A, "B": self.B, "C": self.C, "D": self.D, "sharpness": self.sharpness}


def _tree_signature(trees) -> str:
    h = hashlib.sha1()
    for t in trees:
        h.update(t.parent.tobytes())
        h.update(np.ascontiguousarray(t.gate).tobytes())
    return h.hexdigest()


def _split_cond(cond, lead_shape, grid, c):
    if cond is None:
        return None, None
    M = np.asarray(cond.mask, dtype=np.float64)
    T = np.asarray(cond.tokens, dtype=np.float64)
    if M.shape != lead_shape + grid or T.shape != lead_shape + grid + (c,):
        raise ValueError(f"condition grid {M.shape}/{T.shape} does not match tokens "
                         f"{lead_shape + grid + (c,)}")
    return M.reshape(-1), T.reshape(-1, c)


def build_trees(feats: np.ndarray, n_slices: int, grid: tuple, sharpness: float):
    """MST per slice over fused features (S*L, c)."""
    h, w = grid
    L = h * w
    edges = grid_edges(h, w)
    weights = cosine_distance_edges(feats.reshape(n_slices, L, -1), edges)
    trees = []
    for s in range(n_slices):
        if L == 1:
            trees.append(rooted_tree(1, np.zeros((0, 2), dtype=np.int64), np.zeros(0), sharpness))
            continue
        k = kruskal_edges(L, edges, weights[s])
        trees.append(rooted_tree(L, edges[k], weights[s][k], sharpness))
    return trees


def tree_scan_forward(X, cond, params: ScanParams, mode: str = "tree"):
    """Y = C (A h + D x) over a token grid (h, w, c) or a stack (S, h, w, c).

    ``cond`` (a ConditionEmbedding or None): its tokens T are added to X before
    the graph is built, and its mask M scales each edge gate by
    MASK_FLOOR + (1 - MASK_FLOOR) * sqrt(M_i M_j). ``mode="identity"`` replaces
    the tree aggregation with h_i = B x_i (the per-token ablation).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim not in (3, 4):
        raise ValueError(f"expected (h, w, c) or (S, h, w, c) tokens, got {X.shape}")
    lead_shape = X.shape[:-3]
    grid = X.shape[-3:-1]
    c = X.shape[-1]
    if c != params.channels:
        raise ValueError(f"token channels {c} != scan channels {params.channels}")
    S = int(np.prod(lead_shape)) if lead_shape else 1
    L = grid[0] * grid[1]
    M, T = _split_cond(cond, lead_shape, grid, c)
    feats = X.reshape(-1, c) if T is None else X.reshape(-1, c) + T
    u = feats @ params.B.T

    state = ScanState(grid, lead_shape, mode, feats, u, u, u, u, mask=M,
                      has_cond=cond is not None, fingerprint=params.fingerprint())
    if mode == "tree":
        trees = build_trees(feats, S, grid, params.sharpness)
        batch = TreeBatch.from_trees(trees, L)
        base = batch.gate.copy()
        mfac = np.ones_like(base)
        if M is not None:
            nodes = np.flatnonzero(batch.parent >= 0)
            mfac[nodes] = MASK_FLOOR + (1 - MASK_FLOOR) * np.sqrt(M[nodes] * M[batch.parent[nodes]])
        batch.gate = base * mfac
        h, a = aggregate(u, batch)
        state.trees, state.batch, state.base_gate, state.mask_factor = trees, batch, base, mfac
        state.edge_weight = np.concatenate([t.edge_weight for t in trees])
        state.h, state.a = h, a
        state.tree_signature = _tree_signature(trees)
    elif mode == "identity":
        h = u
    else:
        raise ValueError(f"unknown scan mode {mode!r}")
    state.z = state.h @ params.A.T + feats @ params.D.T
    Y = state.z @ params.C.T
    return Y.reshape(X.shape), state


def _cosine_grad(feats, i, j, dcos, out):
    xi, xj = feats[i], feats[j]
    ni = np.linalg.norm(xi, axis=1, keepdims=True)
    nj = np.linalg.norm(xj, axis=1, keepdims=True)
    cos = np.sum(xi * xj, axis=1, keepdims=True) / (ni * nj)
    d = dcos[:, None]
    np.add.at(out, i, d * (xj / (ni * nj) - cos * xi / ni ** 2))
    np.add.at(out, j, d * (xi / (ni * nj) - cos * xj / nj ** 2))


def _gate_chain(state: ScanState, dgate, sharpness, dfeats, dM):
    """Push gate gradients into features, sharpness, and mask."""
    batch = state.batch
    nodes = np.flatnonzero(batch.parent >= 0)
    if len(nodes) == 0:
        return 0.0
    p = batch.parent[nodes]
    dg = dgate[nodes]
    base = state.base_gate[nodes]
    weight = state.edge_weight[nodes]
    d_base = dg * state.mask_factor[nodes]
    if dM is not None:
        M = state.mask
        d_fac = dg * base * (1 - MASK_FLOOR) * 0.5
        prod = M[nodes] * M[p]
        root = np.sqrt(np.where(prod > 0, prod, 1.0))
        np.add.at(dM, nodes, np.where(prod > 0, d_fac * M[p] / root, 0.0))
        np.add.at(dM, p, np.where(prod > 0, d_fac * M[nodes] / root, 0.0))
    d_weight = -sharpness * base * d_base
    d_sharp = float(np.sum(-weight * base * d_base))
    # weight = 1 - cos; clip at [0, 2] is inactive away from exact (anti)parallel pairs
    _cosine_grad(state.feats, nodes, p, -d_weight, dfeats)
    return d_sharp


def tree_scan_backward(state: ScanState, params: ScanParams, dY, dh_extra=None,
                       scan_weight: float = 0.0) -> ScanGrads:
    """Exact gradients of the forward pass.

    ``dh_extra`` adds a gradient arriving directly at the hidden states (e.g.
    from slice pooling downstream). ``eta`` is the gradient with respect to
    each node's injected state B x_i, obtained by sending dL/dh through the
    tree in both directions. With ``scan_weight`` > 0 the returned gradients
    also include scan_weight * d/dparams of 0.5 * sum ||eta||^2, holding the
    incoming dY and dh_extra fixed.
    """
    if params.fingerprint() != state.fingerprint:
        raise StaleCacheError("scan parameters changed since the forward pass")
    if state.mode == "tree" and _tree_signature(state.trees) != state.tree_signature:
        raise StaleCacheError("spanning trees changed since the forward pass")
    c = params.channels
    dY = np.asarray(dY, dtype=np.float64).reshape(-1, c)
    feats = state.feats
    dC = dY.T @ state.z
    dZ = dY @ params.C
    dA = dZ.T @ state.h
    dD = dZ.T @ feats
    dfeats = dZ @ params.D
    dh = dZ @ params.A
    if dh_extra is not None:
        dh = dh + np.asarray(dh_extra, dtype=np.float64).reshape(dh.shape)
    dM = np.zeros_like(state.mask) if state.mask is not None else None
    d_sharp = 0.0
    loss_scan = 0.0

    if state.mode == "tree":
        batch = state.batch
        eta, a_dh = aggregate(dh, batch)
        dgate = gate_gradient(state.a, state.h, a_dh, eta, batch)
        du = eta
        if scan_weight:
            loss_scan = 0.5 * float(np.sum(eta * eta))
            # d/dv of 0.5 ||G v||^2 is G eta; its gate derivative pairs (v, eta)
            g_eta, a_eta = aggregate(eta, batch)
            dgate = dgate + scan_weight * gate_gradient(a_dh, eta, a_eta, g_eta, batch)
            dv = scan_weight * g_eta
            upstream = dY @ params.C
            dA = dA + upstream.T @ dv
            dC = dC + dY.T @ (dv @ params.A.T)
        d_sharp = _gate_chain(state, dgate, params.sharpness, dfeats, dM)
    else:
        eta = dh
        du = dh
        if scan_weight:
            loss_scan = 0.5 * float(np.sum(eta * eta))
            upstream = dY @ params.C
            dv = scan_weight * eta
            dA = dA + upstream.T @ dv
            dC = dC + dY.T @ (dv @ params.A.T)

    dB = du.T @ feats
    dfeats = dfeats + du @ params.B
    state.eta = eta
    shape = state.lead_shape + state.grid
    dX = dfeats.reshape(shape + (c,))
    return ScanGrads(dX, dX.copy() if state.has_cond else None,
                     None if dM is None else dM.reshape(shape),
                     dA, dB, dC, dD, d_sharp, eta.reshape(shape + (-1,)), loss_scan)


def scan_loss(eta) -> float:
    """0.5 * sum_i ||eta_i||^2."""
    eta = np.asarray(eta, dtype=np.float64)
    return 0.5 * float(np.sum(eta * eta))
