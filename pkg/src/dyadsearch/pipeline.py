"""End-to-end run: synthesize, partition, train, route, index and bench.

Also holds the stage helpers the individual CLI subcommands share.
Vector files use the row position of an entity in its id table as the
vector id, so ``docs.txt`` line ``i`` names vector ``i``.
"""

from __future__ import annotations

import hashlib
import logging
import platform
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .embedding import (ModelParams, PairDataset, TokenVocab, TrainConfig, embed_all, evaluate_matching,
                        save_params, train)
from .errors import DataError, InvariantError
from .graph import BipartiteGraph, build_graph, cluster_affinity, save_graph, write_id_table
from .knn import IVFParams, VectorSet, write_vectors
from .negatives import GraphNegativeSampler, RandomNegativeSampler, SamplerConfig
from .partition import Partitioning, edge_cut, partition, save_partitioning
from .pnns import build_partitioned, save_partitioned
from .report import TIMING_FILES, run_bench, strip_timing, write_bench_outputs
from .router import RouterModel, assign_document, save_router, topk_coverage, train_router
from .synth import SynthConfig, SynthData, generate, write_synth

log = logging.getLogger(__name__)

ARMS = ("graph", "random")


def default_synth(seed: int = 0) -> SynthConfig:
    """Sixteen topics in families of four: enough sibling structure for hard
    negatives to matter, small enough to run in well under a minute."""
    return SynthConfig(topics=16, queries_per_topic=30, docs_per_topic=60, p_in=0.1, p_out=0.0,
                       family_size=4, p_family=0.01, topic_token_prob=0.7, family_token_prob=0.3,
                       heldout_fraction=0.2, seed=seed)


@dataclass
class PipelineConfig:
    synth: SynthConfig = field(default_factory=default_synth)
    clusters: int = 16
    eps: float = 0.05
    backend: str = "exact"
    seed: int = 0
    window: int = 4
    neg_budget: int = 256
    dim: int = 32
    train_steps: int = 200
    lr: float = 0.01
    router_hidden: int = 64
    router_epochs: int = 50
    router_lr: float = 1e-2
    probes: tuple[int, ...] = (1, 2, 4, 8, 16)
    cutoff: float = 0.99
    k: int = 100
    machines: tuple[int, ...] = (1, 2, 4, 8, 16)
    nlist: int = 16
    nprobe: int = 4
    jobs: int = 1
    plots: bool = True


# --------------------------------------------------------------------------
# stage helpers


def pair_dataset(graph: BipartiteGraph, query_tokens: dict[str, list[str]],
                 doc_tokens: dict[str, list[str]]) -> PairDataset:
    missing = [q for q in graph.query_ids if q not in query_tokens] + [d for d in graph.doc_ids if d not in doc_tokens]
    if missing:
        raise DataError(f"{len(missing)} graph entities have no tokens, e.g. {missing[0]!r}")
    q, d, _ = graph.edges()
    return PairDataset(np.stack([q, d], axis=1),
                       [query_tokens[x] for x in graph.query_ids],
                       [doc_tokens[x] for x in graph.doc_ids])


def make_sampler(arm: str, graph: BipartiteGraph, part: Partitioning | None, cfg: SamplerConfig):
    if arm == "random":
        return RandomNegativeSampler(graph, cfg.budget)
    if arm == "graph":
        if part is None:
            raise DataError("graph negatives need a partitioning")
        return GraphNegativeSampler(graph, part, cluster_affinity(graph, part), cfg)
    raise DataError(f"unknown sampler {arm!r}; choose from {ARMS}")


def embed_table(ids: Sequence[str], tokens: dict[str, list[str]], params: ModelParams) -> VectorSet:
    """Embed entities in ``ids`` order; vector id = position."""
    vecs = embed_all([tokens[i] for i in ids], params).astype(np.float32)
    return VectorSet(np.arange(len(ids), dtype=np.uint64), vecs)


def write_model_dir(out: Path, params: ModelParams, query_tokens: dict[str, list[str]],
                    doc_tokens: dict[str, list[str]]) -> dict[str, Path]:
    out.mkdir(parents=True, exist_ok=True)
    paths = {"vocab": out / "vocab.tsv", "model": out / "model.emb", "queries_vec": out / "queries.vec",
             "docs_vec": out / "docs.vec", "query_ids": out / "queries.txt", "doc_ids": out / "docs.txt"}
    params.vocab.save(paths["vocab"])
    save_params(paths["model"], params)
    qids, dids = list(query_tokens), list(doc_tokens)
    write_id_table(paths["query_ids"], qids)
    write_id_table(paths["doc_ids"], dids)
    write_vectors(paths["queries_vec"], embed_table(qids, query_tokens, params))
    write_vectors(paths["docs_vec"], embed_table(dids, doc_tokens, params))
    return paths


def router_training_set(query_vecs: VectorSet, query_ids: Sequence[str], graph: BipartiteGraph,
                        part: Partitioning) -> tuple[np.ndarray, np.ndarray]:
    """Graph queries labelled with their partition cluster."""
    row = {q: i for i, q in enumerate(query_ids)}
    missing = [q for q in graph.query_ids if q not in row]
    if missing:
        raise DataError(f"{len(missing)} graph queries have no vector, e.g. {missing[0]!r}")
    rows = np.array([row[q] for q in graph.query_ids], dtype=np.int64)
    return query_vecs.vectors[rows].astype(np.float64), part.query_clusters(graph.n_queries)


def corpus_clusters(doc_ids: Sequence[str], doc_vecs: VectorSet, cluster_of: dict[str, int],
                    router: RouterModel) -> tuple[np.ndarray, int]:
    """Cluster per corpus row; documents the partitioning never saw are
    routed by the classifier. Returns (clusters, routed count)."""
    out = np.empty(len(doc_ids), dtype=np.int64)
    routed = 0
    for i, d in enumerate(doc_ids):
        c = cluster_of.get(d)
        if c is None:
            c = assign_document(router, doc_vecs.vectors[i])
            routed += 1
        out[i] = c
    return out, routed


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except DataError as e:
        raise DataError(f"[{name}] {e}") from e
    except InvariantError as e:
        raise InvariantError(f"[{name}] {e}") from e


# --------------------------------------------------------------------------
# full run


@dataclass
class PipelineResult:
    out_dir: Path
    partition_cut: int
    matching: dict[str, tuple[float, float]]
    router_accuracy: float
    routed_docs: int
    bench_rows: int


def _train_arms(cfg: PipelineConfig, data: SynthData, graph: BipartiteGraph, part: Partitioning,
                out: Path) -> tuple[dict[str, ModelParams], dict[str, tuple[float, float]]]:
    ds = pair_dataset(graph, data.query_tokens, data.doc_tokens)
    vocab = TokenVocab.build(list(ds.query_tokens) + list(ds.doc_tokens))
    tcfg = TrainConfig(dim=cfg.dim, epochs=1_000_000, max_steps=cfg.train_steps, lr=cfg.lr, seed=cfg.seed)
    qrow = {q: i for i, q in enumerate(data.query_ids)}
    drow = {d: i for i, d in enumerate(data.doc_ids)}
    heldout: dict[int, set[int]] = {}
    for rec in data.heldout_records:
        heldout.setdefault(qrow[rec.query_id], set()).add(drow[rec.doc_id])
    qt = [data.query_tokens[q] for q in data.query_ids]
    ct = [data.doc_tokens[d] for d in data.doc_ids]
    scfg = SamplerConfig(window=cfg.window, budget=cfg.neg_budget, seed=cfg.seed)
    models, metrics = {}, {}
    lines = ["arm\tsteps\tfinal_epoch_loss\tmatching_map\tmatching_recall\teval_queries"]
    for arm in ARMS:
        res = train(ds, tcfg, make_sampler(arm, graph, part, scfg), vocab=vocab)
        models[arm] = res.params
        write_model_dir(out / f"model_{arm}", res.params, data.query_tokens, data.doc_tokens)
        if heldout:
            m, rc, _ = evaluate_matching(res.params, heldout, qt, ct, cfg.k)
        else:
            m, rc = float("nan"), float("nan")
        metrics[arm] = (m, rc)
        lines.append(f"{arm}\t{res.steps}\t{res.epoch_losses[-1]:.6f}\t{m:.6f}\t{rc:.6f}\t{len(heldout)}")
    (out / "training.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return models, metrics


def _write_manifest(cfg: PipelineConfig, out: Path) -> Path:
    rows = [("package_version", __version__), ("python", platform.python_version()),
            ("numpy", np.__version__), ("seed", str(cfg.seed)), ("synth_seed", str(cfg.synth.seed))]
    for k, v in asdict(cfg).items():
        if k != "synth":
            rows.append((f"config.{k}", ",".join(map(str, v)) if isinstance(v, tuple) else str(v)))
    for k, v in asdict(cfg.synth).items():
        rows.append((f"synth.{k}", str(v)))
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.tsv")
    for p in files:
        rel = p.relative_to(out).as_posix()
        if p.name in TIMING_FILES:
            continue
        if p.name == "bench.tsv":
            digest = hashlib.sha256(strip_timing(p.read_text(encoding="utf-8")).encode()).hexdigest()
            rows.append((f"sha256:{rel}[timing stripped]", digest))
        else:
            rows.append((f"sha256:{rel}", sha256_file(p)))
    path = out / "manifest.tsv"
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("key\tvalue\n")
        for k, v in rows:
            fh.write(f"{k}\t{v}\n")
    return path


def run_pipeline(cfg: PipelineConfig, out_dir: str | Path) -> PipelineResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = _stage("generate", generate, cfg.synth)
    _stage("generate", write_synth, data, out / "data")
    graph = _stage("build_graph", build_graph, data.records)
    save_graph(graph, out / "graph")

    part = _stage("partition", partition, graph, cfg.clusters, cfg.eps, cfg.seed)
    save_partitioning(out / "partition.tsv", graph, part)
    cut = edge_cut(graph, part)

    models, metrics = _stage("train", _train_arms, cfg, data, graph, part, out)

    # routing and search use the graph-negative model
    params = models["graph"]
    qvecs = embed_table(data.query_ids, data.query_tokens, params)
    dvecs = embed_table(data.doc_ids, data.doc_tokens, params)
    X, y = _stage("train_router", router_training_set, qvecs, data.query_ids, graph, part)
    router, acc = _stage("train_router", train_router, X, y, cfg.clusters, cfg.router_hidden,
                         cfg.router_epochs, cfg.seed, cfg.router_lr)
    save_router(out / "router.rtr", router)
    cov = topk_coverage(router, X, y, min(max(cfg.probes), cfg.clusters))
    (out / "router.tsv").write_text(f"train_accuracy\ttop{min(max(cfg.probes), cfg.clusters)}_coverage\n"
                                    f"{acc:.6f}\t{cov:.6f}\n", encoding="utf-8")

    nq = graph.n_queries
    cluster_of = {d: int(c) for d, c in zip(graph.doc_ids, part.doc_clusters(nq))}
    doc_clusters, routed = corpus_clusters(data.doc_ids, dvecs, cluster_of, router)
    ivf = IVFParams(cfg.nlist, min(cfg.nprobe, cfg.nlist), 20, cfg.seed) if cfg.backend == "ivf" else None
    index = _stage("build_partitioned", build_partitioned, dvecs, doc_clusters, cfg.clusters, router,
                   cfg.backend, ivf, cfg.jobs, cfg.cutoff)
    save_partitioned(index, out / "index")

    report = _stage("bench", run_bench, dvecs.normalized(), qvecs.vectors, index, cfg.probes, cfg.k, cfg.cutoff, cfg.machines)
    write_bench_outputs(report, out / "bench", plots=cfg.plots)
    _write_manifest(cfg, out)
    return PipelineResult(out, cut, metrics, acc, routed, len(report.rows))


def with_seed(cfg: PipelineConfig, seed: int) -> PipelineConfig:
    return replace(cfg, seed=seed, synth=replace(cfg.synth, seed=seed))
