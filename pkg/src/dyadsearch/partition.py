"""Balanced k-way partitioning of the interaction graph.

Multilevel scheme: coarsen by heavy-edge matching, grow balanced regions on
the coarsest graph, then project back level by level with boundary
Fiduccia-Mattheyses refinement. Balance is over queries and documents
jointly: every cluster holds at most ``floor((1 + eps) * ceil(|V| / r))``
vertices.
"""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

from .errors import DataError, InvariantError
from .graph import BipartiteGraph

log = logging.getLogger(__name__)

REFINE_PASSES = 10
INIT_TRIALS = 8


@dataclass(frozen=True)
class Partitioning:
    """Cluster id per unified vertex (queries first, then documents)."""

    assignment: np.ndarray
    r: int
    eps: float = 0.05
    seed: int = 0

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        object.__setattr__(self, "assignment", a)
        if self.r < 1:
            raise DataError("cluster count must be >= 1")
        if a.size and (a.min() < 0 or a.max() >= self.r):
            raise DataError(f"cluster ids must lie in [0, {self.r})")

    @property
    def n_vertices(self) -> int:
        return int(self.assignment.shape[0])

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.r)

    def capacity(self) -> int:
        return balance_capacity(self.n_vertices, self.r, self.eps)

    def members(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == c)

    def doc_clusters(self, n_queries: int) -> np.ndarray:
        return self.assignment[n_queries:]

    def query_clusters(self, n_queries: int) -> np.ndarray:
        return self.assignment[:n_queries]


def balance_capacity(n: int, r: int, eps: float) -> int:
    # small slack keeps float rounding of (1 + eps) from flipping the floor
    return max(1, int(math.floor((1.0 + eps) * math.ceil(n / r) + 1e-9)))


def edge_cut(graph: BipartiteGraph, partitioning: Partitioning) -> int:
    """Total weight of edges whose endpoints lie in different clusters."""
    a = partitioning.assignment
    if a.shape[0] != graph.n_vertices:
        raise DataError(
            f"partitioning covers {a.shape[0]} vertices, graph has {graph.n_vertices}"
        )
    q, d, w = graph.edges()
    return int(w[a[q] != a[graph.n_queries + d]].sum())


def balance_factor(partitioning: Partitioning) -> float:
    """Largest cluster size over the ideal ``ceil(|V| / r)``."""
    ideal = math.ceil(partitioning.n_vertices / partitioning.r)
    return float(partitioning.sizes().max()) / ideal


# --------------------------------------------------------------------------
# level-graph helpers; ``adj`` is a symmetric CSR with no self loops and
# ``vw`` holds vertex weights (number of original vertices merged).


def _adj_cut(adj: sp.csr_matrix, part: np.ndarray) -> int:
    coo = adj.tocoo()
    return int(coo.data[part[coo.row] != part[coo.col]].sum()) // 2


def _heavy_edge_matching(adj, vw, max_vw, rng) -> np.ndarray:
    n = adj.shape[0]
    indptr = adj.indptr.tolist()
    indices = adj.indices.tolist()
    data = adj.data.tolist()
    w_list = vw.tolist()
    match = [-1] * n
    for v in rng.permutation(n).tolist():
        if match[v] >= 0:
            continue
        best, best_w = -1, 0
        wv = w_list[v]
        for k in range(indptr[v], indptr[v + 1]):
            u = indices[k]
            if match[u] >= 0 or u == v or wv + w_list[u] > max_vw:
                continue
            # indices are sorted, so strict > keeps the lowest index on ties
            if data[k] > best_w:
                best, best_w = u, data[k]
        if best >= 0:
            match[v], match[best] = best, v
        else:
            match[v] = v
    return np.asarray(match, dtype=np.int64)


def _contract(adj, vw, match):
    n = adj.shape[0]
    rep = np.minimum(np.arange(n), match)
    _, cmap = np.unique(rep, return_inverse=True)
    nc = int(cmap.max()) + 1
    P = sp.csr_matrix((np.ones(n, dtype=np.int64), (np.arange(n), cmap)), shape=(n, nc))
    cadj = (P.T @ adj @ P).tocsr()
    cadj.setdiag(0)
    cadj.eliminate_zeros()
    cadj.sort_indices()
    cvw = np.bincount(cmap, weights=vw, minlength=nc).astype(np.int64)
    return cadj, cvw, cmap


def _spread_seeds(adj, r, rng) -> list[int]:
    """Farthest-first seeds by hop distance; unreachable counts as infinite."""
    n = adj.shape[0]
    seeds = [int(rng.integers(n))]
    dist = csgraph.dijkstra(adj, indices=seeds[0], unweighted=True)
    while len(seeds) < r:
        dist[seeds] = -1.0
        top = dist.max()
        cands = np.flatnonzero(dist == top)
        s = int(cands[rng.integers(len(cands))])
        seeds.append(s)
        dist = np.minimum(dist, csgraph.dijkstra(adj, indices=s, unweighted=True))
    return seeds


def _grow_regions(adj, vw, r, cap, rng) -> np.ndarray:
    n = adj.shape[0]
    indptr = adj.indptr.tolist()
    indices = adj.indices.tolist()
    data = adj.data.tolist()
    w_list = vw.tolist()
    ideal = float(vw.sum()) / r
    part = [-1] * n
    load = [0] * r
    conn: list[dict[int, int]] = [dict() for _ in range(r)]
    heaps: list[list[tuple[int, int]]] = [[] for _ in range(r)]
    unassigned = n

    def add(v, c):
        nonlocal unassigned
        part[v] = c
        load[c] += w_list[v]
        unassigned -= 1
        cc = conn[c]
        for k in range(indptr[v], indptr[v + 1]):
            u = indices[k]
            if part[u] < 0:
                cc[u] = cc.get(u, 0) + data[k]
                heapq.heappush(heaps[c], (-cc[u], u))

    for c, s in enumerate(_spread_seeds(adj, r, rng)):
        add(s, c)
    active = set(range(r))
    next_free = 0
    while unassigned and active:
        c = min(active, key=lambda x: (load[x], x))
        v = -1
        heap = heaps[c]
        while heap:
            negw, u = heapq.heappop(heap)
            if part[u] < 0 and conn[c].get(u) == -negw:
                v = u
                break
        if v < 0:
            if load[c] >= ideal:
                active.discard(c)
                continue
            while part[next_free] >= 0:
                next_free += 1
            v = next_free
        if load[c] + w_list[v] > cap:
            active.discard(c)
            continue
        add(v, c)
        if load[c] >= ideal:
            active.discard(c)

    for v in range(n):
        if part[v] >= 0:
            continue
        cw: dict[int, int] = {}
        for k in range(indptr[v], indptr[v + 1]):
            pu = part[indices[k]]
            if pu >= 0:
                cw[pu] = cw.get(pu, 0) + data[k]
        room = [c for c in cw if load[c] + w_list[v] <= cap]
        if room:
            c = max(room, key=lambda x: (cw[x], -load[x], -x))
        else:
            c = min(range(r), key=lambda x: (load[x], x))
        part[v] = c
        load[c] += w_list[v]
    return np.asarray(part, dtype=np.int64)


class _Level:
    """Python-list view of one level graph for the refinement loops."""

    def __init__(self, adj, vw):
        self.adj = adj
        self.vw = vw
        self.indptr = adj.indptr.tolist()
        self.indices = adj.indices.tolist()
        self.data = adj.data.tolist()
        self.w = vw.tolist()

    def conn(self, v, part) -> dict[int, int]:
        cw: dict[int, int] = {}
        ind, dat = self.indices, self.data
        for k in range(self.indptr[v], self.indptr[v + 1]):
            p = part[ind[k]]
            cw[p] = cw.get(p, 0) + dat[k]
        return cw

    def boundary(self, part_arr: np.ndarray) -> np.ndarray:
        coo = self.adj.tocoo()
        mask = part_arr[coo.row] != part_arr[coo.col]
        return np.unique(coo.row[mask])


def _best_move(lv, v, part, load, cap):
    own = part[v]
    cw = lv.conn(v, part)
    base = cw.get(own, 0)
    best_c, best_gain = -1, None
    for c, w in cw.items():
        if c == own or load[c] + lv.w[v] > cap:
            continue
        gain = w - base
        if best_gain is None or gain > best_gain or (gain == best_gain and c < best_c):
            best_c, best_gain = c, gain
    return best_c, best_gain


def fm_pass(lv: _Level, part: list[int], load: list[int], cap: int, patience: int = 64) -> int:
    """One k-way boundary FM pass; returns the cut reduction it achieved.

    Vertices move one at a time to their best balance-feasible cluster, even
    at a loss, and are then locked. After ``patience`` moves without a new
    best cut the pass stops and rolls back to the best prefix, so a pass
    never increases the cut.
    """
    heap: list[tuple[int, int]] = []
    locked: set[int] = set()
    for v in lv.boundary(np.asarray(part)).tolist():
        c, g = _best_move(lv, v, part, load, cap)
        if c >= 0:
            heap.append((-g, v))
    heapq.heapify(heap)
    moves: list[tuple[int, int]] = []      # (vertex, cluster it left)
    delta = best_delta = 0
    best_len = 0
    while heap and len(moves) - best_len < patience:
        negg, v = heapq.heappop(heap)
        if v in locked:
            continue
        c, g = _best_move(lv, v, part, load, cap)
        if c < 0:
            continue
        if g != -negg:
            heapq.heappush(heap, (-g, v))
            continue
        src = part[v]
        load[src] -= lv.w[v]
        load[c] += lv.w[v]
        part[v] = c
        locked.add(v)
        moves.append((v, src))
        delta += g
        if delta > best_delta:
            best_delta, best_len = delta, len(moves)
        for k in range(lv.indptr[v], lv.indptr[v + 1]):
            u = lv.indices[k]
            if u not in locked:
                cu, gu = _best_move(lv, u, part, load, cap)
                if cu >= 0:
                    heapq.heappush(heap, (-gu, u))
    for v, src in reversed(moves[best_len:]):
        load[part[v]] -= lv.w[v]
        load[src] += lv.w[v]
        part[v] = src
    return best_delta


def _rebalance(lv: _Level, part: list[int], load: list[int], cap: int, r: int) -> None:
    """Move vertices out of overweight clusters at the least cut increase."""
    part_arr = np.asarray(part)
    for c in range(r):
        guard = 0
        while load[c] > cap and guard < lv.adj.shape[0]:
            guard += 1
            members = np.flatnonzero(part_arr == c).tolist()
            best = None
            for v in members:
                cw = lv.conn(v, part)
                base = cw.get(c, 0)
                for t in range(r):
                    if t == c or load[t] + lv.w[v] > cap:
                        continue
                    key = (-(cw.get(t, 0) - base), lv.w[v], load[t], v, t)
                    if best is None or key < best:
                        best = key
            if best is None:
                break
            v, t = best[3], best[4]
            load[c] -= lv.w[v]
            load[t] += lv.w[v]
            part[v] = t
            part_arr[v] = t


def _refine(lv: _Level, part_arr: np.ndarray, r: int, cap: int) -> np.ndarray:
    part = part_arr.tolist()
    load = np.bincount(part_arr, weights=lv.vw, minlength=r).astype(np.int64).tolist()
    if max(load) > cap:
        _rebalance(lv, part, load, cap, r)
    for _ in range(REFINE_PASSES):
        if fm_pass(lv, part, load, cap) <= 0:
            break
    return np.asarray(part, dtype=np.int64)


def partition(
    graph: BipartiteGraph,
    r: int,
    eps: float = 0.05,
    seed: int = 0,
    ignore_weights: bool = False,
    trials: int = INIT_TRIALS,
) -> Partitioning:
    """Partition ``graph`` into ``r`` balanced clusters with low edge cut."""
    n = graph.n_vertices
    if r < 1:
        raise DataError("cluster count must be >= 1")
    if r > n:
        raise DataError(f"cannot split {n} vertices into {r} clusters")
    if eps < 0:
        raise DataError("balance tolerance must be >= 0")
    cap = balance_capacity(n, r, eps)
    if cap * r < n:
        raise DataError(f"balance infeasible: {r} clusters of at most {cap} cannot hold {n} vertices")
    if r == 1:
        return Partitioning(np.zeros(n, dtype=np.int64), 1, eps, seed)

    rng = np.random.default_rng(seed)
    adj = graph.unified_adjacency(ignore_weights=ignore_weights).astype(np.int64)
    vw = np.ones(n, dtype=np.int64)
    target = max(30 * r, 200)
    max_vw = max(2, int(1.5 * n / target))

    levels = [(adj, vw)]
    maps = []
    while levels[-1][0].shape[0] > target:
        a, w = levels[-1]
        match = _heavy_edge_matching(a, w, max_vw, rng)
        ca, cw, cmap = _contract(a, w, match)
        if ca.shape[0] > 0.95 * a.shape[0]:
            break
        levels.append((ca, cw))
        maps.append(cmap)
    log.debug("coarsened %d -> %d vertices in %d levels", n, levels[-1][0].shape[0], len(maps))

    coarse = _Level(*levels[-1])
    fine_levels = [_Level(*lvl) for lvl in levels[:-1]]
    best, best_key = None, None
    for _ in range(max(1, trials)):
        part = _refine(coarse, _grow_regions(coarse.adj, coarse.vw, r, cap, rng), r, cap)
        for lvl in range(len(maps) - 1, -1, -1):
            part = _refine(fine_levels[lvl], part[maps[lvl]], r, cap)
        key = (max(0, int(np.bincount(part, minlength=r).max()) - cap), _adj_cut(adj, part))
        if best_key is None or key < best_key:
            best, best_key = part, key
    part = best

    result = Partitioning(part, r, eps, seed)
    if result.sizes().max() > cap:
        raise InvariantError(f"partition exceeds balance cap {cap}: sizes {result.sizes().tolist()}")
    return result


# --------------------------------------------------------------------------
# partition files


def entity_keys(graph: BipartiteGraph) -> list[str]:
    """Namespaced entity keys in unified vertex order (``q:`` / ``d:``)."""
    return [f"q:{q}" for q in graph.query_ids] + [f"d:{d}" for d in graph.doc_ids]


def save_partitioning(path: str | Path, graph: BipartiteGraph, p: Partitioning) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"#r={p.r} eps={p.eps} seed={p.seed}\n")
        for key, c in zip(entity_keys(graph), p.assignment.tolist()):
            fh.write(f"{key}\t{c}\n")


def read_partition_file(path: str | Path) -> tuple[dict[str, int], dict[str, str]]:
    """Raw entity -> cluster map plus header fields."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"partition file not found: {path}")
    header: dict[str, str] = {}
    mapping: dict[str, int] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    k, _, v = tok.partition("=")
                    header[k] = v
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 columns")
            try:
                mapping[cols[0]] = int(cols[1])
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad cluster id {cols[1]!r}") from None
    if "r" not in header:
        raise DataError(f"{path}: missing '#r=' header")
    return mapping, header


def load_partitioning(path: str | Path, graph: BipartiteGraph) -> Partitioning:
    mapping, header = read_partition_file(path)
    keys = entity_keys(graph)
    missing = [k for k in keys if k not in mapping]
    if missing:
        raise DataError(f"{len(missing)} graph vertices missing from partition file, e.g. {missing[0]}")
    return Partitioning(
        np.array([mapping[k] for k in keys], dtype=np.int64),
        int(header["r"]),
        float(header.get("eps", 0.05)),
        int(header.get("seed", 0)),
    )
