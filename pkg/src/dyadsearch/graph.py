"""Weighted query-document interaction graph and cluster affinity."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np
import scipy.sparse as sp

from .errors import DataError


class InteractionRecord(NamedTuple):
    query_id: str
    doc_id: str
    weight: int


def _check_record(rec: InteractionRecord, where: str = "") -> None:
    if not rec.query_id or not rec.doc_id:
        raise DataError(f"{where}empty query or doc id")
    if int(rec.weight) < 1:
        raise DataError(f"{where}weight must be >= 1, got {rec.weight}")


def load_interactions(path: str | Path) -> list[InteractionRecord]:
    """Parse a ``query<TAB>doc<TAB>weight`` file, no header.

    Raises DataError naming the offending line for wrong column counts and
    non-integer or non-positive weights.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"interactions file not found: {path}")
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 columns, got {len(cols)}")
            try:
                weight = int(cols[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: weight {cols[2]!r} is not an integer") from None
            rec = InteractionRecord(cols[0], cols[1], weight)
            _check_record(rec, f"{path}:{lineno}: ")
            records.append(rec)
    return records


def write_interactions(path: str | Path, records: Iterable[InteractionRecord]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for q, d, w in records:
            fh.write(f"{q}\t{d}\t{int(w)}\n")


@dataclass(frozen=True)
class BipartiteGraph:
    """Aggregated bipartite graph with dense vertex indices.

    Queries occupy unified vertex indices ``[0, n_queries)`` and documents
    ``[n_queries, n_queries + n_docs)``. ``qd`` is the query-by-doc weight
    matrix in CSR form; ``dq`` is its transpose.
    """

    query_ids: tuple[str, ...]
    doc_ids: tuple[str, ...]
    qd: sp.csr_matrix
    dq: sp.csr_matrix = field(repr=False)
    total_edge_weight: int

    @property
    def n_queries(self) -> int:
        return len(self.query_ids)

    @property
    def n_docs(self) -> int:
        return len(self.doc_ids)

    @property
    def n_vertices(self) -> int:
        return self.n_queries + self.n_docs

    @property
    def n_edges(self) -> int:
        return int(self.qd.nnz)

    def edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(query index, doc index, weight) arrays, sorted by query then doc."""
        coo = self.qd.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return coo.row[order].astype(np.int64), coo.col[order].astype(np.int64), coo.data[order].astype(np.int64)

    def unified_adjacency(self, ignore_weights: bool = False) -> sp.csr_matrix:
        """Symmetric adjacency over all vertices (queries first, then docs)."""
        qd = self.qd.copy()
        if ignore_weights:
            qd.data = np.ones_like(qd.data)
        nq, nd = self.n_queries, self.n_docs
        adj = sp.bmat([[sp.csr_matrix((nq, nq), dtype=np.int64), qd],
                       [qd.T, sp.csr_matrix((nd, nd), dtype=np.int64)]], format="csr")
        adj.sort_indices()
        return adj

    def query_index(self) -> dict[str, int]:
        return {q: i for i, q in enumerate(self.query_ids)}

    def doc_index(self) -> dict[str, int]:
        return {d: j for j, d in enumerate(self.doc_ids)}

    def positive_pairs(self) -> set[tuple[int, int]]:
        q, d, _ = self.edges()
        return set(zip(q.tolist(), d.tolist()))

    def docs_of_query(self, q: int) -> np.ndarray:
        return self.qd.indices[self.qd.indptr[q]:self.qd.indptr[q + 1]]


def build_graph(records: list[InteractionRecord]) -> BipartiteGraph:
    """Aggregate records into a bipartite graph.

    Duplicate (query, doc) pairs have their weights summed. Vertex tables
    assign dense indices in first-seen order.
    """
    if not records:
        raise DataError("cannot build a graph from zero interaction records")
    qidx: dict[str, int] = {}
    didx: dict[str, int] = {}
    rows = np.empty(len(records), dtype=np.int64)
    cols = np.empty(len(records), dtype=np.int64)
    weights = np.empty(len(records), dtype=np.int64)
    for i, rec in enumerate(records):
        _check_record(rec, f"record {i}: ")
        rows[i] = qidx.setdefault(rec.query_id, len(qidx))
        cols[i] = didx.setdefault(rec.doc_id, len(didx))
        weights[i] = rec.weight
    qd = sp.coo_matrix((weights, (rows, cols)), shape=(len(qidx), len(didx))).tocsr()
    qd.sum_duplicates()
    qd.sort_indices()
    dq = qd.T.tocsr()
    dq.sort_indices()
    return BipartiteGraph(
        query_ids=tuple(qidx),
        doc_ids=tuple(didx),
        qd=qd,
        dq=dq,
        total_edge_weight=int(weights.sum()),
    )


def save_graph(graph: BipartiteGraph, directory: str | Path, prefix: str = "graph") -> None:
    """Persist as aggregated TSV plus query and doc id tables."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    q, d, w = graph.edges()
    write_interactions(
        directory / f"{prefix}.tsv",
        (InteractionRecord(graph.query_ids[a], graph.doc_ids[b], c) for a, b, c in zip(q, d, w)),
    )
    write_id_table(directory / f"{prefix}.queries.txt", graph.query_ids)
    write_id_table(directory / f"{prefix}.docs.txt", graph.doc_ids)


def load_graph(directory: str | Path, prefix: str = "graph") -> BipartiteGraph:
    directory = Path(directory)
    records = load_interactions(directory / f"{prefix}.tsv")
    queries = read_id_table(directory / f"{prefix}.queries.txt")
    docs = read_id_table(directory / f"{prefix}.docs.txt")
    # rebuild with the persisted index order
    qidx = {s: i for i, s in enumerate(queries)}
    didx = {s: i for i, s in enumerate(docs)}
    try:
        rows = np.array([qidx[r.query_id] for r in records], dtype=np.int64)
        cols = np.array([didx[r.doc_id] for r in records], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"edge endpoint {exc.args[0]!r} missing from id tables") from None
    weights = np.array([r.weight for r in records], dtype=np.int64)
    qd = sp.coo_matrix((weights, (rows, cols)), shape=(len(queries), len(docs))).tocsr()
    qd.sum_duplicates()
    qd.sort_indices()
    dq = qd.T.tocsr()
    dq.sort_indices()
    return BipartiteGraph(tuple(queries), tuple(docs), qd, dq, int(weights.sum()))


def write_id_table(path: str | Path, ids: Iterable[str]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for s in ids:
            fh.write(f"{s}\n")


def read_id_table(path: str | Path) -> list[str]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"id table not found: {path}")
    with path.open(encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


def cluster_affinity(graph: BipartiteGraph, partitioning) -> np.ndarray:
    """Cross-cluster edge weight matrix.

    ``A[i, j]`` (i != j) is the total weight of edges with one endpoint in
    cluster i and the other in cluster j. The diagonal holds intra-cluster
    weight and is ignored by samplers.
    """
    assignment = np.asarray(partitioning.assignment)
    if assignment.shape[0] != graph.n_vertices:
        raise DataError(
            f"partitioning covers {assignment.shape[0]} vertices, graph has {graph.n_vertices}"
        )
    r = int(partitioning.r)
    q, d, w = graph.edges()
    cq = assignment[q]
    cd = assignment[graph.n_queries + d]
    A = np.zeros((r, r), dtype=np.int64)
    np.add.at(A, (cq, cd), w)
    off = A + A.T
    off[np.diag_indices(r)] = np.diag(A)
    return off
