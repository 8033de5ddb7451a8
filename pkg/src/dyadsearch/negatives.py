"""Hard negative mining from a graph partitioning.

For each query, pick one cluster uniformly from the ``w`` clusters with the
highest cross-cluster edge weight to the query's own cluster, then draw
``ceil(t / n)`` documents uniformly (with replacement) from it. Known
positive pairs are never returned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .graph import BipartiteGraph
from .partition import Partitioning


@dataclass(frozen=True)
class SamplerConfig:
    window: int = 1
    budget: int = 256
    seed: int = 0
    proportional: bool = False
    mix_random: float = 0.0

    def __post_init__(self):
        if self.window < 1:
            raise DataError("window size must be >= 1")
        if self.budget < 1:
            raise DataError("sample budget must be >= 1")
        if not 0.0 <= self.mix_random <= 1.0:
            raise DataError("mix_random must lie in [0, 1]")


def top_affinity_clusters(affinity: np.ndarray, c: int, w: int) -> list[int]:
    """The ``w`` clusters most connected to ``c`` (excluding ``c``).

    Ties go to the lower cluster id; zero-affinity clusters pad the list in
    id order, which the same sort already produces.
    """
    r = affinity.shape[0]
    if not 0 <= c < r:
        raise DataError(f"cluster {c} outside [0, {r})")
    others = np.array([j for j in range(r) if j != c], dtype=np.int64)
    if others.size == 0:
        return []
    row = affinity[c, others]
    order = np.lexsort((others, -row))
    return others[order[:min(w, r - 1)]].tolist()


class _PositiveIndex:
    def __init__(self, graph: BipartiteGraph):
        self.qd = graph.qd

    def docs(self, q: int) -> np.ndarray:
        return self.qd.indices[self.qd.indptr[q]:self.qd.indptr[q + 1]]


def _draw_excluding(rng, pool: np.ndarray, banned: np.ndarray, s: int) -> np.ndarray:
    """``s`` uniform draws from ``pool`` with replacement, redrawing banned ones."""
    out = pool[rng.integers(len(pool), size=s)]
    if banned.size:
        bad = np.isin(out, banned)
        while bad.any():
            out[bad] = pool[rng.integers(len(pool), size=int(bad.sum()))]
            bad = np.isin(out, banned)
    return out


class GraphNegativeSampler:
    """Precomputed cluster membership and positives for repeated batches."""

    def __init__(self, graph: BipartiteGraph, partitioning: Partitioning, affinity: np.ndarray, cfg: SamplerConfig):
        if partitioning.n_vertices != graph.n_vertices:
            raise DataError("partitioning does not cover the graph")
        self.graph = graph
        self.cfg = cfg
        self.affinity = affinity
        self.r = partitioning.r
        nq = graph.n_queries
        self.query_cluster = partitioning.query_clusters(nq)
        self.doc_cluster = partitioning.doc_clusters(nq)
        order = np.argsort(self.doc_cluster, kind="stable")
        bounds = np.searchsorted(self.doc_cluster[order], np.arange(self.r + 1))
        self.cluster_docs = [order[bounds[c]:bounds[c + 1]] for c in range(self.r)]
        self.all_docs = np.arange(graph.n_docs)
        self.pos = _PositiveIndex(graph)
        self._windows: dict[int, list[int]] = {}

    def window(self, c: int) -> list[int]:
        if c not in self._windows:
            if self.r == 1:
                # degenerate: no other cluster exists, fall back to the only one
                self._windows[c] = [0]
            else:
                self._windows[c] = top_affinity_clusters(self.affinity, c, self.cfg.window)
        return self._windows[c]

    def _choose(self, rng, c: int, cands: list[int]) -> int:
        if self.cfg.proportional:
            w = self.affinity[c, cands].astype(np.float64)
            if w.sum() > 0:
                return cands[int(np.searchsorted(np.cumsum(w), rng.random() * w.sum(), side="right"))]
        return cands[int(rng.integers(len(cands)))]

    def sample(self, queries, rng: np.random.Generator, choices_out: list | None = None) -> list[tuple[int, int]]:
        """Negative (query, doc) pairs in graph index space."""
        queries = [int(q) for q in queries]
        n = len(queries)
        if n == 0:
            return []
        s = math.ceil(self.cfg.budget / n)
        pairs: list[tuple[int, int]] = []
        for q in queries:
            c = int(self.query_cluster[q])
            banned = self.pos.docs(q)
            banned_clusters = self.doc_cluster[banned]
            n_rand = int(rng.binomial(s, self.cfg.mix_random)) if self.cfg.mix_random > 0 else 0
            n_hard = s - n_rand
            cands = list(self.window(c))
            chosen = -1
            while cands:
                j = self._choose(rng, c, cands)
                if len(self.cluster_docs[j]) > int((banned_clusters == j).sum()):
                    chosen = j
                    break
                cands.remove(j)
            if chosen < 0:
                raise DataError(f"query {self.graph.query_ids[q]!r}: no window cluster has a non-positive document")
            if choices_out is not None:
                choices_out.append(chosen)
            docs = _draw_excluding(rng, self.cluster_docs[chosen], banned, n_hard)
            if n_rand:
                docs = np.concatenate([docs, _draw_excluding(rng, self.all_docs, banned, n_rand)])
            pairs.extend((q, int(d)) for d in docs)
        return pairs


class RandomNegativeSampler:
    """Baseline: ``ceil(t / n)`` uniform documents per query, positives excluded."""

    def __init__(self, graph: BipartiteGraph, budget: int):
        self.graph = graph
        self.budget = budget
        self.all_docs = np.arange(graph.n_docs)
        self.pos = _PositiveIndex(graph)

    def sample(self, queries, rng: np.random.Generator, choices_out=None) -> list[tuple[int, int]]:
        queries = [int(q) for q in queries]
        if not queries:
            return []
        s = math.ceil(self.budget / len(queries))
        pairs = []
        for q in queries:
            banned = self.pos.docs(q)
            if len(banned) >= self.graph.n_docs:
                raise DataError(f"query {self.graph.query_ids[q]!r} is positive for every document")
            pairs.extend((q, int(d)) for d in _draw_excluding(rng, self.all_docs, banned, s))
        return pairs


def sample_negatives(
    graph: BipartiteGraph,
    partitioning: Partitioning,
    affinity: np.ndarray,
    queries,
    cfg: SamplerConfig,
) -> list[tuple[int, int]]:
    """One batch of hard negatives; deterministic in ``cfg.seed``."""
    sampler = GraphNegativeSampler(graph, partitioning, affinity, cfg)
    return sampler.sample(queries, np.random.default_rng(cfg.seed))


def dump_negatives(path: str | Path, graph: BipartiteGraph, pairs) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for q, d in pairs:
            fh.write(f"{graph.query_ids[q]}\t{graph.doc_ids[d]}\t0\n")
