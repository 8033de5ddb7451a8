"""Partitioned nearest neighbour search.

One backend index per cluster; the router picks which clusters to probe for
a query, each probed cluster returns its own top-k, and the union is cut to
the global top-k.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .knn import ExactIndex, Hits, IVFIndex, IVFParams, VectorSet, ivf_build, load_ivf, merge_hits, read_vectors, save_ivf, write_vectors
from .router import RouterModel, load_router, predict, save_router, top_clusters

BACKENDS = ("exact", "ivf")
DEFAULT_CUTOFF = 0.99


@dataclass
class PartitionedIndex:
    indexes: list            # per cluster: ExactIndex | IVFIndex | None when empty
    router: RouterModel
    backend: str
    build_seconds: list[float]
    ivf_params: IVFParams | None = None
    cutoff: float = DEFAULT_CUTOFF

    @property
    def r(self) -> int:
        return len(self.indexes)

    def cluster_sizes(self) -> list[int]:
        return [0 if ix is None else ix.count for ix in self.indexes]

    def cluster_ids(self, c: int) -> np.ndarray:
        ix = self.indexes[c]
        return np.empty(0, dtype=np.uint64) if ix is None else ix.vectors.ids


def _build_one(vs: VectorSet, backend: str, ivf: IVFParams | None):
    if vs.count == 0:
        return None, 0.0
    t0 = time.perf_counter()
    if backend == "exact":
        ix = ExactIndex.build(vs)
    else:
        p = ivf or IVFParams()
        nlist = min(p.nlist, vs.count)
        ix = ivf_build(vs, IVFParams(nlist, min(p.nprobe, nlist), p.iterations, p.seed))
    return ix, time.perf_counter() - t0


def build_partitioned(
    corpus: VectorSet,
    doc_clusters: np.ndarray,
    r: int,
    router: RouterModel,
    backend: str = "exact",
    ivf_params: IVFParams | None = None,
    jobs: int = 1,
    cutoff: float = DEFAULT_CUTOFF,
) -> PartitionedIndex:
    """Split ``corpus`` by ``doc_clusters`` (one cluster id per corpus row)
    and build one backend index per cluster, recording each build's wall time."""
    if backend not in BACKENDS:
        raise DataError(f"unknown backend {backend!r}; choose from {BACKENDS}")
    doc_clusters = np.asarray(doc_clusters, dtype=np.int64)
    if doc_clusters.shape != (corpus.count,):
        raise DataError(f"{corpus.count} corpus rows but {doc_clusters.shape[0]} cluster assignments")
    if corpus.count and (doc_clusters.min() < 0 or doc_clusters.max() >= r):
        raise DataError(f"document cluster ids must lie in [0, {r})")
    if router.r != r:
        raise DataError(f"router predicts {router.r} clusters, partitioning has {r}")
    if router.input_dim != corpus.dim:
        raise DataError(f"router input dim {router.input_dim} != corpus dim {corpus.dim}")
    subsets = [corpus.subset(np.flatnonzero(doc_clusters == c)) for c in range(r)]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            built = list(pool.map(lambda vs: _build_one(vs, backend, ivf_params), subsets))
    else:
        built = [_build_one(vs, backend, ivf_params) for vs in subsets]
    return PartitionedIndex(
        indexes=[b[0] for b in built],
        router=router,
        backend=backend,
        build_seconds=[b[1] for b in built],
        ivf_params=ivf_params,
        cutoff=cutoff,
    )


def probe_list(index: PartitionedIndex, q: np.ndarray, d: int, t: float) -> list[int]:
    return top_clusters(predict(index.router, q), min(d, index.r), t)


def pnns_query(
    index: PartitionedIndex,
    q: np.ndarray,
    k: int,
    d: int,
    t: float = DEFAULT_CUTOFF,
    parallel: bool = False,
    probes_out: list | None = None,
) -> Hits:
    """Search the router's probe list and merge into the global top-k.

    Each probed cluster is asked for ``k`` results. Probing is serial unless
    ``parallel`` is set. When ``probes_out`` is given, the probe list used
    is appended to it.
    """
    if d < 1:
        raise DataError("max probes must be >= 1")
    q = np.asarray(q, dtype=np.float32)
    probes = probe_list(index, q, d, t)
    if probes_out is not None:
        probes_out.append(probes)
    targets = [index.indexes[c] for c in probes if index.indexes[c] is not None]
    if parallel and len(targets) > 1:
        with ThreadPoolExecutor(max_workers=len(targets)) as pool:
            parts = list(pool.map(lambda ix: ix.search(q, k), targets))
    else:
        parts = [ix.search(q, k) for ix in targets]
    return merge_hits(parts, k)


def recall_at_k(approx, exact) -> float:
    """``|exact & approx| / |exact|``."""
    exact_set = {int(i) for i in exact}
    if not exact_set:
        raise DataError("exact result list is empty")
    return len(exact_set.intersection(int(i) for i in approx)) / len(exact_set)


# --------------------------------------------------------------------------
# persistence: meta.tsv, cluster_<i>.vec (+ IVF files), router.rtr


def save_partitioned(index: PartitionedIndex, directory: str | Path) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    p = index.ivf_params or IVFParams()
    with (out / "meta.tsv").open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"#backend={index.backend} r={index.r} cutoff={index.cutoff} "
                 f"nlist={p.nlist} nprobe={p.nprobe} iterations={p.iterations} seed={p.seed}\n")
        for c, ix in enumerate(index.indexes):
            fh.write(f"{c}\t{0 if ix is None else ix.count}\t{index.backend}\n")
    for c, ix in enumerate(index.indexes):
        if ix is None:
            continue
        write_vectors(out / f"cluster_{c}.vec", ix.vectors)
        if isinstance(ix, IVFIndex):
            save_ivf(ix, out / f"cluster_{c}")
    save_router(out / "router.rtr", index.router)
    with (out / "build_times.tsv").open("w", encoding="utf-8", newline="\n") as fh:
        for c, s in enumerate(index.build_seconds):
            fh.write(f"{c}\t{s:.6f}\n")


def load_partitioned(directory: str | Path) -> PartitionedIndex:
    src = Path(directory)
    meta = src / "meta.tsv"
    if not meta.exists():
        raise DataError(f"index directory has no meta.tsv: {src}")
    lines = meta.read_text(encoding="utf-8").splitlines()
    header = dict(tok.split("=", 1) for tok in lines[0].lstrip("#").split())
    backend = header["backend"]
    params = IVFParams(int(header["nlist"]), int(header["nprobe"]), int(header["iterations"]), int(header["seed"]))
    indexes = []
    for line in lines[1:]:
        c, count, _ = line.split("\t")
        if int(count) == 0:
            indexes.append(None)
            continue
        vs = read_vectors(src / f"cluster_{c}.vec")
        if backend == "ivf":
            nlist = min(params.nlist, vs.count)
            indexes.append(load_ivf(src / f"cluster_{c}", vs, min(params.nprobe, nlist)))
        else:
            indexes.append(ExactIndex(vs))
    times = [0.0] * len(indexes)
    bt = src / "build_times.tsv"
    if bt.exists():
        for line in bt.read_text(encoding="utf-8").splitlines():
            c, s = line.split("\t")
            times[int(c)] = float(s)
    return PartitionedIndex(indexes, load_router(src / "router.rtr"), backend, times,
                            params if backend == "ivf" else None, float(header["cutoff"]))
