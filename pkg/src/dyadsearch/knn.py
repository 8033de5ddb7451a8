"""KNN backends: exact brute force and an inverted-file (IVF) index.

Vectors are L2-normalised at ingest so cosine similarity is an inner
product. Every backend scores rows with :func:`row_scores`, whose result for
a given row does not depend on which other rows are scored alongside it;
that is what lets partitioned and unpartitioned searches agree bit for bit.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Protocol

import numpy as np

from .errors import DataError

VEC_MAGIC = b"VEC1"


class Hits(NamedTuple):
    ids: np.ndarray      # uint64
    scores: np.ndarray   # float32, descending

    def __len__(self) -> int:
        return len(self.ids)


def normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise DataError("cannot normalise a zero vector")
    return (x / norms).astype(np.float32)


def row_scores(mat: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Inner product of each row with ``q``, row-independent summation."""
    return (mat * q).sum(axis=1, dtype=np.float32)


def top_k(ids: np.ndarray, scores: np.ndarray, k: int) -> Hits:
    """Top ``k`` by descending score, ties to the lower id."""
    n = len(ids)
    if k < n:
        # keep everything tied with the k-th score so the id tie-break is exact
        kth = np.partition(scores, n - k)[n - k]
        keep = np.flatnonzero(scores >= kth)
        ids, scores = ids[keep], scores[keep]
    order = np.lexsort((ids, -scores))[:k]
    return Hits(ids[order], scores[order])


def merge_hits(parts: list[Hits], k: int) -> Hits:
    if not parts:
        return Hits(np.empty(0, dtype=np.uint64), np.empty(0, dtype=np.float32))
    ids = np.concatenate([p.ids for p in parts])
    scores = np.concatenate([p.scores for p in parts])
    return top_k(ids, scores, k)


@dataclass
class VectorSet:
    """Row-major float32 vectors with unique uint64 external ids."""

    ids: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.uint64)
        v = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if v.ndim != 2 or v.shape[0] != self.ids.shape[0]:
            raise DataError(f"vectors {v.shape} do not match {self.ids.shape[0]} ids")
        if not np.all(np.isfinite(v)):
            raise DataError("vectors contain non-finite values")
        if len(np.unique(self.ids)) != len(self.ids):
            raise DataError("vector ids are not unique")
        self.vectors = v

    @property
    def count(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def normalized(self) -> "VectorSet":
        return VectorSet(self.ids, normalize_rows(self.vectors) if self.count else self.vectors)

    def subset(self, rows: np.ndarray) -> "VectorSet":
        return VectorSet(self.ids[rows], self.vectors[rows])


def write_vectors(path: str | Path, vs: VectorSet) -> None:
    """VEC1: magic, u32 version, u64 count, u32 dim, u32 id width, rows."""
    row = np.dtype([("id", "<u8"), ("v", "<f4", (vs.dim,))])
    buf = np.empty(vs.count, dtype=row)
    buf["id"] = vs.ids
    buf["v"] = vs.vectors
    with Path(path).open("wb") as fh:
        fh.write(VEC_MAGIC + struct.pack("<IQII", 1, vs.count, vs.dim, 8))
        fh.write(buf.tobytes())


def read_vectors(path: str | Path) -> VectorSet:
    path = Path(path)
    if not path.exists():
        raise DataError(f"vector file not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != VEC_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}")
    version, count, dim, idw = struct.unpack_from("<IQII", raw, 4)
    if version != 1 or idw != 8:
        raise DataError(f"{path}: unsupported version {version} / id width {idw}")
    row = np.dtype([("id", "<u8"), ("v", "<f4", (dim,))])
    body = raw[24:]
    if len(body) != count * row.itemsize:
        raise DataError(f"{path}: expected {count} rows of dim {dim}, file size disagrees")
    arr = np.frombuffer(body, dtype=row, count=count)
    return VectorSet(arr["id"].copy(), arr["v"].reshape(count, dim).copy())


# --------------------------------------------------------------------------


class SearchIndex(Protocol):
    kind: str
    build_seconds: float

    @property
    def count(self) -> int: ...

    def search(self, q: np.ndarray, k: int) -> Hits: ...

    def memory_bytes(self) -> int: ...


def brute_force_search(vectors: VectorSet, q: np.ndarray, k: int) -> Hits:
    """Exact top-k by cosine; the recall oracle. ``vectors`` must be unit rows."""
    if k < 1:
        raise DataError("k must be >= 1")
    q = np.asarray(q, dtype=np.float32)
    if q.shape != (vectors.dim,):
        raise DataError(f"query dim {q.shape} != index dim {vectors.dim}")
    return top_k(vectors.ids, row_scores(vectors.vectors, q), k)


@dataclass
class ExactIndex:
    vectors: VectorSet
    build_seconds: float = 0.0
    kind: str = "exact"

    @classmethod
    def build(cls, vectors: VectorSet) -> "ExactIndex":
        t0 = time.perf_counter()
        vs = vectors.normalized()
        return cls(vs, time.perf_counter() - t0)

    @property
    def count(self) -> int:
        return self.vectors.count

    @property
    def dim(self) -> int:
        return self.vectors.dim

    def search(self, q: np.ndarray, k: int) -> Hits:
        return brute_force_search(self.vectors, q, k)

    def memory_bytes(self) -> int:
        return int(self.vectors.vectors.nbytes + self.vectors.ids.nbytes)


# --------------------------------------------------------------------------
# IVF


@dataclass(frozen=True)
class IVFParams:
    nlist: int = 64
    nprobe: int = 8
    iterations: int = 20
    seed: int = 0


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    c64 = c.astype(np.float64)
    return (x64 * x64).sum(1)[:, None] - 2.0 * x64 @ c64.T + (c64 * c64).sum(1)[None, :]


def kmeans(x: np.ndarray, k: int, iterations: int = 20, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are repaired by splitting the largest one: its member
    farthest from the centroid becomes the new centre.
    """
    rng = np.random.default_rng(seed)
    m = x.shape[0]
    x64 = x.astype(np.float64)
    centres = np.empty((k, x.shape[1]))
    centres[0] = x64[rng.integers(m)]
    d2 = ((x64 - centres[0]) ** 2).sum(1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(m))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, m - 1)
        centres[j] = x64[idx]
        d2 = np.minimum(d2, ((x64 - centres[j]) ** 2).sum(1))

    assign = np.zeros(m, dtype=np.int64)
    for _ in range(iterations):
        assign = _sq_dists(x64, centres).argmin(1)
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centres)
        np.add.at(sums, assign, x64)
        nonempty = counts > 0
        centres[nonempty] = sums[nonempty] / counts[nonempty, None]
        for e in np.flatnonzero(~nonempty):
            big = int(np.argmax(counts))
            members = np.flatnonzero(assign == big)
            if len(members) < 2:
                continue
            far = members[np.argmax(((x64[members] - centres[big]) ** 2).sum(1))]
            centres[e] = x64[far]
            assign[far] = e
            counts[big] -= 1
            counts[e] = 1
    assign = _sq_dists(x64, centres).argmin(1)
    return centres.astype(np.float32), assign


@dataclass
class IVFIndex:
    centroids: np.ndarray                 # (nlist, dim) float32
    lists: list[np.ndarray]               # row indices per list
    vectors: VectorSet
    nprobe: int = 8
    build_seconds: float = 0.0
    kind: str = "ivf"

    @classmethod
    def build(cls, vectors: VectorSet, params: IVFParams = IVFParams()) -> "IVFIndex":
        return ivf_build(vectors, params)

    @property
    def count(self) -> int:
        return self.vectors.count

    @property
    def dim(self) -> int:
        return self.vectors.dim

    @property
    def nlist(self) -> int:
        return int(self.centroids.shape[0])

    def probe_lists(self, q: np.ndarray, nprobe: int) -> np.ndarray:
        d = _sq_dists(q[None, :], self.centroids)[0]
        return np.lexsort((np.arange(self.nlist), d))[:nprobe]

    def search(self, q: np.ndarray, k: int, nprobe: int | None = None) -> Hits:
        return ivf_search(self, q, k, self.nprobe if nprobe is None else nprobe)

    def memory_bytes(self) -> int:
        return int(self.vectors.vectors.nbytes + self.vectors.ids.nbytes
                   + self.centroids.nbytes + sum(l.nbytes for l in self.lists))


def ivf_build(vectors: VectorSet, params: IVFParams = IVFParams()) -> IVFIndex:
    if params.nlist < 1 or params.nlist > vectors.count:
        raise DataError(f"nlist={params.nlist} must lie in [1, {vectors.count}]")
    if not 1 <= params.nprobe <= params.nlist:
        raise DataError(f"nprobe={params.nprobe} must lie in [1, nlist={params.nlist}]")
    t0 = time.perf_counter()
    vs = vectors.normalized()
    centres, assign = kmeans(vs.vectors, params.nlist, params.iterations, params.seed)
    order = np.argsort(assign, kind="stable")
    bounds = np.searchsorted(assign[order], np.arange(params.nlist + 1))
    lists = [order[bounds[i]:bounds[i + 1]] for i in range(params.nlist)]
    return IVFIndex(centres, lists, vs, params.nprobe, time.perf_counter() - t0)


def ivf_search(index: IVFIndex, q: np.ndarray, k: int, nprobe: int) -> Hits:
    """Scan the ``nprobe`` nearest lists and rerank exactly."""
    if k < 1:
        raise DataError("k must be >= 1")
    if not 1 <= nprobe <= index.nlist:
        raise DataError(f"nprobe={nprobe} must lie in [1, {index.nlist}]")
    q = np.asarray(q, dtype=np.float32)
    if q.shape != (index.dim,):
        raise DataError(f"query dim {q.shape} != index dim {index.dim}")
    probed = index.probe_lists(q, nprobe)
    rows = np.concatenate([index.lists[i] for i in probed])
    if rows.size == 0:
        return merge_hits([], k)
    vs = index.vectors
    return top_k(vs.ids[rows], row_scores(vs.vectors[rows], q), k)


def save_ivf(index: IVFIndex, stem: str | Path) -> None:
    """``<stem>.centroids.vec`` (VEC1, id = list number) + ``<stem>.lists.bin``
    of little-endian u64 (list id, vector id) pairs."""
    stem = Path(stem)
    write_vectors(f"{stem}.centroids.vec",
                  VectorSet(np.arange(index.nlist, dtype=np.uint64), index.centroids))
    pairs = np.concatenate([
        np.stack([np.full(len(l), i, dtype=np.uint64), index.vectors.ids[l]], axis=1)
        for i, l in enumerate(index.lists)
    ]) if index.count else np.empty((0, 2), dtype=np.uint64)
    Path(f"{stem}.lists.bin").write_bytes(pairs.astype("<u8").tobytes())


def load_ivf(stem: str | Path, vectors: VectorSet, nprobe: int) -> IVFIndex:
    """Rebuild from ``save_ivf`` output; ``vectors`` must be the stored unit rows."""
    stem = Path(stem)
    cents = read_vectors(f"{stem}.centroids.vec")
    pairs = np.frombuffer(Path(f"{stem}.lists.bin").read_bytes(), dtype="<u8").reshape(-1, 2)
    # persisted vectors were normalised at build time; renormalising could flip bits
    vs = vectors
    row_of = {int(i): r for r, i in enumerate(vs.ids.tolist())}
    lists = [[] for _ in range(cents.count)]
    for lst, vid in pairs.tolist():
        lists[lst].append(row_of[vid])
    return IVFIndex(cents.vectors, [np.asarray(l, dtype=np.int64) for l in lists], vs,
                    min(nprobe, cents.count))
