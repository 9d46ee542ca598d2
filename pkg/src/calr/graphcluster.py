"""Graph construction and clustering: mutual-kNN graphs, the two-level map
equation with a Louvain-style minimizer, and Ward agglomerative clustering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import OUTLIER, ClusterAssignment, as_generator

_MOVE_GAIN = 1e-10  # a move must improve codelength by more than this


@dataclass(frozen=True, eq=False)
class KnnGraph:
    """Undirected weighted graph; edges are canonical (i < j) rows."""

    n_nodes: int
    edges: np.ndarray  # (E, 2) int64
    weights: np.ndarray  # (E,) float64
    k: int
    mutual: bool
    sim_threshold: float

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if edges.shape[0] != weights.shape[0]:
            raise ValueError("edges and weights length mismatch")
        if edges.size and (edges.min() < 0 or edges.max() >= self.n_nodes):
            raise ValueError("edge endpoint out of range")
        if edges.size and not np.all(edges[:, 0] < edges[:, 1]):
            raise ValueError("edges must be canonical i < j pairs")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "weights", weights)

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())

    def adjacency(self) -> list[dict[int, float]]:
        adj: list[dict[int, float]] = [dict() for _ in range(self.n_nodes)]
        for (i, j), w in zip(self.edges, self.weights):
            adj[int(i)][int(j)] = float(w)
            adj[int(j)][int(i)] = float(w)
        return adj

    def strengths(self) -> np.ndarray:
        s = np.zeros(self.n_nodes)
        np.add.at(s, self.edges[:, 0], self.weights)
        np.add.at(s, self.edges[:, 1], self.weights)
        return s


def build_knn_graph(features, k: int = 15, mutual: bool = True, sim_threshold: float = 0.5) -> KnnGraph:
    """Cosine-similarity kNN graph over unit-norm feature rows.

    Each node proposes its k most similar neighbors (ties broken toward the
    smaller index); proposals below sim_threshold are dropped. With
    mutual=True an edge survives only if both endpoints proposed it,
    otherwise either proposal suffices. No self edges.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be 2-d")
    n = x.shape[0]
    if not (1 <= k < n):
        raise ValueError(f"k must satisfy 1 <= k < n_samples, got k={k}, n={n}")
    sims = x @ x.T
    sims = 0.5 * (sims + sims.T)  # one weight per unordered pair
    np.fill_diagonal(sims, -np.inf)
    # stable argsort on -sims: equal similarities resolve to the smaller index
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]

    proposed: set[tuple[int, int]] = set()
    for i in range(n):
        row = sims[i]
        for j in order[i]:
            j = int(j)
            if row[j] >= sim_threshold:
                proposed.add((i, j))

    pairs: set[tuple[int, int]] = set()
    for i, j in proposed:
        if mutual and (j, i) not in proposed:
            continue
        pairs.add((min(i, j), max(i, j)))
    ordered = sorted(pairs)
    edges = np.array(ordered, dtype=np.int64).reshape(-1, 2)
    weights = np.array([sims[i, j] for i, j in ordered], dtype=np.float64)
    return KnnGraph(n, edges, weights, k=k, mutual=mutual, sim_threshold=sim_threshold)


def _plogp(x: float) -> float:
    return x * np.log2(x) if x > 0.0 else 0.0


def map_equation(graph: KnnGraph, module_of) -> float:
    """Two-level map-equation codelength in bits for an undirected partition.

    Visit rates come from edge weights (no teleportation): p_a = s_a / 2W,
    module exit rate q_m = w_out_m / 2W.
    """
    module_of = np.asarray(module_of, dtype=np.int64)
    if graph.n_nodes == 0:
        raise ValueError("map equation is undefined on an empty graph")
    if module_of.shape != (graph.n_nodes,):
        raise ValueError("module_of must assign every node")
    two_w = 2.0 * graph.total_weight
    if two_w <= 0.0:
        raise ValueError("map equation needs positive total edge weight")

    p = graph.strengths() / two_w
    modules, module_idx = np.unique(module_of, return_inverse=True)
    sum_p = np.zeros(len(modules))
    np.add.at(sum_p, module_idx, p)
    w_out = np.zeros(len(modules))
    mi = module_idx[graph.edges[:, 0]]
    mj = module_idx[graph.edges[:, 1]]
    cross = mi != mj
    np.add.at(w_out, mi[cross], graph.weights[cross])
    np.add.at(w_out, mj[cross], graph.weights[cross])
    q = w_out / two_w

    codelength = _plogp(float(q.sum()))
    codelength -= 2.0 * sum(_plogp(float(v)) for v in q)
    codelength += sum(_plogp(float(qm + pm)) for qm, pm in zip(q, sum_p))
    codelength -= sum(_plogp(float(v)) for v in p)
    return float(codelength)


@dataclass(frozen=True, eq=False)
class Partition:
    """Node -> module map with its codelength and the per-move descent trace."""

    module_of: np.ndarray
    codelength: float
    history: tuple[float, ...] = ()

    @property
    def n_modules(self) -> int:
        return len(np.unique(self.module_of))


class _Level:
    """One aggregation level: supernodes with visit mass and external weights."""

    def __init__(self, p, adj, two_w, const_term):
        self.p = p  # visit mass per supernode (from original strengths)
        self.adj = adj  # list[dict[neighbor, weight]], self loops excluded
        self.two_w = two_w
        self.const_term = const_term  # sum of plogp over original node rates

    def n(self):
        return len(self.p)


def _local_moves(level: _Level, rng, history: list[float]) -> np.ndarray:
    """Greedy codelength descent over supernodes; returns their module ids."""
    n = level.n()
    module_of = np.arange(n)
    sum_p = level.p.copy()
    deg = np.array([sum(a.values()) for a in level.adj])
    w_out = deg.copy()
    two_w = level.two_w

    s_q = float(w_out.sum()) / two_w
    codelength = (
        _plogp(s_q)
        - 2.0 * sum(_plogp(v / two_w) for v in w_out)
        + sum(_plogp(w_out[m] / two_w + sum_p[m]) for m in range(n))
        - level.const_term
    )
    if not history:
        history.append(codelength)

    improved = True
    while improved:
        improved = False
        for v in rng.permutation(n):
            v = int(v)
            if not level.adj[v]:
                continue
            a = int(module_of[v])
            k_to: dict[int, float] = {}
            for nb, w in level.adj[v].items():
                m = int(module_of[nb])
                k_to[m] = k_to.get(m, 0.0) + w
            k_a = k_to.get(a, 0.0)
            p_v = level.p[v]
            base_a = (_plogp(w_out[a] / two_w), _plogp(w_out[a] / two_w + sum_p[a]))
            best = None  # (delta, b, w_out_a, w_out_b, s_q_new)
            for b in sorted(k_to):
                if b == a:
                    continue
                k_b = k_to[b]
                w_out_a = w_out[a] - deg[v] + 2.0 * k_a
                w_out_b = w_out[b] + deg[v] - 2.0 * k_b
                s_q_new = s_q + (w_out_a + w_out_b - w_out[a] - w_out[b]) / two_w
                d_t1 = (
                    _plogp(w_out_a / two_w)
                    + _plogp(w_out_b / two_w)
                    - base_a[0]
                    - _plogp(w_out[b] / two_w)
                )
                d_t2 = (
                    _plogp(w_out_a / two_w + sum_p[a] - p_v)
                    + _plogp(w_out_b / two_w + sum_p[b] + p_v)
                    - base_a[1]
                    - _plogp(w_out[b] / two_w + sum_p[b])
                )
                delta = _plogp(s_q_new) - _plogp(s_q) - 2.0 * d_t1 + d_t2
                if best is None or delta < best[0]:
                    best = (delta, b, w_out_a, w_out_b, s_q_new)
            if best is not None and best[0] < -_MOVE_GAIN:
                delta, b, w_out_a, w_out_b, s_q_new = best
                w_out[a], w_out[b] = w_out_a, w_out_b
                sum_p[a] -= p_v
                sum_p[b] += p_v
                s_q = s_q_new
                module_of[v] = b
                codelength += delta
                history.append(codelength)
                improved = True
    return module_of


def _aggregate(level: _Level, module_of: np.ndarray):
    """Collapse modules into supernodes; intra-module weight becomes invisible."""
    modules = sorted(set(int(m) for m in module_of))
    remap = {m: i for i, m in enumerate(modules)}
    n_new = len(modules)
    p_new = np.zeros(n_new)
    for v in range(len(module_of)):
        p_new[remap[int(module_of[v])]] += level.p[v]
    adj_new: list[dict[int, float]] = [dict() for _ in range(n_new)]
    for v, nbrs in enumerate(level.adj):
        mv = remap[int(module_of[v])]
        for nb, w in nbrs.items():
            if nb <= v:
                continue
            mn = remap[int(module_of[nb])]
            if mv == mn:
                continue
            adj_new[mv][mn] = adj_new[mv].get(mn, 0.0) + w
            adj_new[mn][mv] = adj_new[mn].get(mv, 0.0) + w
    # mapping: old supernode id -> new supernode id
    mapping = np.array([remap[int(m)] for m in module_of], dtype=np.int64)
    return _Level(p_new, adj_new, level.two_w, level.const_term), mapping


def infomap_partition(graph: KnnGraph, rng) -> Partition:
    """Minimize the two-level map equation by local moves plus aggregation.

    Accepted moves strictly decrease the tracked codelength (see history);
    the returned codelength is recomputed from scratch on the final partition
    and must agree with the tracked value within 1e-9.
    """
    rng = as_generator(rng)
    if graph.n_nodes == 0:
        raise ValueError("cannot partition an empty graph")
    if graph.total_weight <= 0.0:
        # no walk to encode: every node is its own module
        return Partition(np.arange(graph.n_nodes), 0.0, ())

    two_w = 2.0 * graph.total_weight
    p = graph.strengths() / two_w
    const_term = sum(_plogp(float(v)) for v in p)
    level = _Level(p.copy(), graph.adjacency(), two_w, const_term)

    history: list[float] = []
    node_module = np.arange(graph.n_nodes)
    while True:
        module_of = _local_moves(level, rng, history)
        n_modules = len(set(int(m) for m in module_of))
        if n_modules == level.n():
            break
        level, mapping = _aggregate(level, module_of)
        node_module = mapping[node_module]
        if n_modules == 1:
            break

    final = np.asarray(node_module, dtype=np.int64)
    codelength = map_equation(graph, final)
    tracked = history[-1] if history else codelength
    if abs(codelength - tracked) > 1e-9:
        raise AssertionError(f"tracked codelength {tracked} drifted from recomputed {codelength}")
    return Partition(final, codelength, tuple(history))


def assignment_from_partition(graph: KnnGraph, partition: Partition) -> ClusterAssignment:
    """Modules -> clusters; isolated nodes and singleton modules become OUTLIER."""
    strengths = graph.strengths()
    raw = partition.module_of
    counts: dict[int, int] = {}
    for m in raw:
        counts[int(m)] = counts.get(int(m), 0) + 1
    labels = np.full(graph.n_nodes, OUTLIER, dtype=np.int64)
    for v in range(graph.n_nodes):
        if strengths[v] > 0.0 and counts[int(raw[v])] >= 2:
            labels[v] = int(raw[v])
    return ClusterAssignment.from_labels(labels)


def infomap_cluster(graph: KnnGraph, rng) -> ClusterAssignment:
    """Global clustering via the map equation; singletons and isolates -> OUTLIER."""
    if graph.n_nodes == 1:
        # degenerate one-node graph: the node is its own (only) cluster
        return ClusterAssignment(np.zeros(1, dtype=np.int64), 1)
    partition = infomap_partition(graph, rng)
    return assignment_from_partition(graph, partition)


def agglomerative_cluster(features, n_clusters: int, camera: int | None = None) -> ClusterAssignment:
    """Bottom-up Ward clustering of the given rows into exactly n_clusters.

    Merge costs follow the Lance-Williams recurrence on squared distances;
    equal costs merge the smallest (i, j) pair; final labels are numbered by
    each cluster's smallest member index.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be 2-d")
    n = x.shape[0]
    if not (1 <= n_clusters <= n):
        raise ValueError(f"n_clusters must lie in [1, {n}], got {n_clusters}")

    g = x @ x.T
    cost = np.maximum(np.diag(g)[:, None] + np.diag(g)[None, :] - 2.0 * g, 0.0)
    np.fill_diagonal(cost, np.inf)
    upper = np.triu(np.ones((n, n), dtype=bool), 1)
    sizes = np.ones(n)
    members: list[list[int] | None] = [[i] for i in range(n)]

    for _ in range(n - n_clusters):
        masked = np.where(upper, cost, np.inf)
        flat = int(np.argmin(masked))  # row-major: ties resolve to smallest (i, j)
        i, j = divmod(flat, n)
        d_ij = cost[i, j]
        ni, nj = sizes[i], sizes[j]
        active = np.array([m is not None for m in members])
        active[i] = active[j] = False
        nk = sizes[active]
        d_new = ((ni + nk) * cost[i, active] + (nj + nk) * cost[j, active] - nk * d_ij) / (
            ni + nj + nk
        )
        cost[i, active] = d_new
        cost[active, i] = d_new
        cost[j, :] = np.inf
        cost[:, j] = np.inf
        sizes[i] = ni + nj
        members[i].extend(members[j])  # type: ignore[union-attr]
        members[j] = None
        upper[j, :] = False
        upper[:, j] = False

    final = [m for m in members if m is not None]
    final.sort(key=min)
    labels = np.empty(n, dtype=np.int64)
    for cid, group in enumerate(final):
        for idx in group:
            labels[idx] = cid
    return ClusterAssignment(labels, len(final), camera)
