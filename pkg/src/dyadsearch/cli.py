"""Command-line entry point: ``dyadsearch <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 bad input data, 3 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .embedding import TokenVocab, TrainConfig, train
from .errors import DataError, InvariantError
from .graph import build_graph, load_interactions, read_id_table
from .knn import IVFParams, read_vectors
from .negatives import SamplerConfig, dump_negatives
from .partition import edge_cut, load_partitioning, partition, read_partition_file, save_partitioning
from .pipeline import (ARMS, PipelineConfig, corpus_clusters, default_synth, make_sampler, pair_dataset,
                       router_training_set, run_pipeline, write_model_dir)
from .pnns import BACKENDS, build_partitioned, load_partitioned, pnns_query, save_partitioned
from .report import run_bench, write_bench_outputs
from .router import load_router, save_router, train_router
from .schedule import simulate_build, write_schedule_tsv
from .synth import generate, read_tokens, write_synth

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("values must be positive integers")
    return vals


def _read_build_times(path: Path) -> list[float]:
    if not path.exists():
        raise DataError(f"build times file not found: {path}")
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line or line.startswith("#"):
            continue
        cols = line.split("\t")
        try:
            out.append(float(cols[-1]))
        except ValueError:
            if lineno == 1:
                continue    # header
            raise DataError(f"{path}:{lineno}: bad seconds value {cols[-1]!r}") from None
    return out


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataError(f"{what} not found: {path}")
    return path


# --------------------------------------------------------------------------
# subcommands


def cmd_gen(a) -> int:
    cfg = replace(default_synth(a.seed), topics=a.topics, queries_per_topic=a.queries_per_topic,
                  docs_per_topic=a.docs_per_topic, p_in=a.p_in, p_out=a.p_out, family_size=a.family_size,
                  p_family=a.p_family, heldout_fraction=a.heldout_fraction)
    data = generate(cfg)
    write_synth(data, a.out)
    print(f"wrote {len(data.records)} interactions ({len(data.heldout_records)} held out) to {a.out}")
    return EXIT_OK


def cmd_partition(a) -> int:
    graph = build_graph(load_interactions(a.interactions))
    p = partition(graph, a.clusters, a.eps, a.seed, ignore_weights=a.ignore_weights)
    save_partitioning(a.out, graph, p)
    print(f"r={p.r} cut={edge_cut(graph, p)} sizes={p.sizes().tolist()}")
    return EXIT_OK


def cmd_train(a) -> int:
    graph = build_graph(load_interactions(a.interactions))
    qtok, dtok = read_tokens(a.tokens)
    ds = pair_dataset(graph, qtok, dtok)
    part = load_partitioning(a.partition, graph) if a.partition else None
    sampler = make_sampler(a.sampler, graph, part, SamplerConfig(a.window, a.neg_budget, a.seed))
    vocab = TokenVocab.build(list(ds.query_tokens) + list(ds.doc_tokens))
    cfg = TrainConfig(dim=a.dim, lr=a.lr, epochs=a.epochs, max_steps=a.steps, seed=a.seed)
    res = train(ds, cfg, sampler, vocab=vocab)
    out = Path(a.out)
    write_model_dir(out, res.params, qtok, dtok)
    with (out / "loss.tsv").open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch\tloss\n")
        for i, v in enumerate(res.epoch_losses):
            fh.write(f"{i}\t{v:.6f}\n")
    if a.dump_negatives:
        rng = np.random.default_rng(a.seed)
        dump_negatives(out / "negatives.tsv", graph, sampler.sample(range(graph.n_queries), rng))
    print(f"{res.steps} steps, final epoch loss {res.epoch_losses[-1]:.6f}")
    return EXIT_OK


def cmd_train_router(a) -> int:
    model_dir = Path(a.model_dir)
    qvecs = read_vectors(_require(model_dir / "queries.vec", "query vectors"))
    qids = read_id_table(_require(model_dir / "queries.txt", "query id table"))
    graph = build_graph(load_interactions(a.interactions))
    part = load_partitioning(a.partition, graph)
    X, y = router_training_set(qvecs, qids, graph, part)
    model, acc = train_router(X, y, part.r, a.hidden, a.epochs, a.seed, a.lr)
    save_router(a.out, model)
    print(f"router train accuracy {acc:.4f}")
    return EXIT_OK


def cmd_build_index(a) -> int:
    corpus = read_vectors(a.corpus)
    doc_ids = read_id_table(a.doc_ids)
    if len(doc_ids) != corpus.count:
        raise DataError(f"{a.doc_ids} lists {len(doc_ids)} ids, corpus has {corpus.count} vectors")
    if not np.array_equal(corpus.ids, np.arange(corpus.count, dtype=np.uint64)):
        raise DataError("corpus vector ids must be row positions 0..n-1")
    mapping, header = read_partition_file(a.partition)
    r = int(header["r"])
    router = load_router(a.router)
    cluster_of = {k[2:]: c for k, c in mapping.items() if k.startswith("d:")}
    clusters, routed = corpus_clusters(doc_ids, corpus, cluster_of, router)
    ivf = IVFParams(a.nlist, a.nprobe, a.iterations, a.seed) if a.backend == "ivf" else None
    index = build_partitioned(corpus, clusters, r, router, a.backend, ivf, a.jobs, a.cutoff)
    save_partitioned(index, a.out)
    print(f"built {r} {a.backend} indexes ({routed} docs routed by classifier), "
          f"total build {sum(index.build_seconds):.3f}s")
    return EXIT_OK


def cmd_query(a) -> int:
    index = load_partitioned(a.index)
    queries = read_vectors(a.queries)
    if queries.count == 0:
        raise DataError("query file is empty")
    qv = queries.normalized().vectors
    d = max(a.probes)
    with open(a.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("query_id\trank\tdoc_id\tscore\n")
        for qid, q in zip(queries.ids.tolist(), qv):
            hits = pnns_query(index, q, a.k, d, a.cutoff)
            for rank, (i, s) in enumerate(zip(hits.ids.tolist(), hits.scores.tolist()), start=1):
                fh.write(f"{qid}\t{rank}\t{i}\t{s:.6f}\n")
    print(f"wrote results for {queries.count} queries to {a.out}")
    return EXIT_OK


def cmd_bench(a) -> int:
    index = load_partitioned(_require(Path(a.index), "index directory"))
    corpus = read_vectors(a.corpus).normalized()
    queries = read_vectors(a.queries)
    if queries.count == 0:
        raise DataError("query file is empty")
    report = run_bench(corpus, queries.normalized().vectors, index, a.probes, a.k, a.cutoff, a.machines)
    paths = write_bench_outputs(report, a.out, plots=not a.no_plots)
    print(paths["text"].read_text(encoding="utf-8"), end="")
    return EXIT_OK


def cmd_schedule(a) -> int:
    rows = simulate_build(_read_build_times(Path(a.build_times)), a.machines)
    write_schedule_tsv(a.out, rows)
    for m, t in rows:
        print(f"{m}\t{t:.6f}")
    return EXIT_OK


def cmd_pipeline(a) -> int:
    synth = replace(default_synth(a.seed), topics=a.topics, queries_per_topic=a.queries_per_topic,
                    docs_per_topic=a.docs_per_topic)
    cfg = PipelineConfig(synth=synth, clusters=a.clusters, eps=a.eps, backend=a.backend, seed=a.seed,
                         window=a.window, neg_budget=a.neg_budget, dim=a.dim, train_steps=a.steps,
                         probes=a.probes, cutoff=a.cutoff, k=a.k, jobs=a.jobs, plots=not a.no_plots)
    res = run_pipeline(cfg, a.out)
    print(f"cut={res.partition_cut} router_acc={res.router_accuracy:.4f} routed_docs={res.routed_docs}")
    for arm, (m, rc) in res.matching.items():
        print(f"{arm:>6} negatives: matching MAP@{cfg.k} {m:.4f} recall@{cfg.k} {rc:.4f}")
    print((Path(a.out) / "bench" / "bench.txt").read_text(encoding="utf-8"), end="")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _synth_args(p, full: bool) -> None:
    d = default_synth()
    p.add_argument("--topics", type=int, default=d.topics)
    p.add_argument("--queries-per-topic", type=int, default=d.queries_per_topic)
    p.add_argument("--docs-per-topic", type=int, default=d.docs_per_topic)
    if full:
        p.add_argument("--p-in", type=float, default=d.p_in)
        p.add_argument("--p-out", type=float, default=d.p_out)
        p.add_argument("--family-size", type=int, default=d.family_size)
        p.add_argument("--p-family", type=float, default=d.p_family)
        p.add_argument("--heldout-fraction", type=float, default=d.heldout_fraction)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="dyadsearch", description="Graph-partitioned retrieval toolkit.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a planted synthetic dataset")
    _synth_args(p, full=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("partition", help="balanced partitioning of the interaction graph")
    p.add_argument("--interactions", required=True)
    p.add_argument("--clusters", type=int, required=True)
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ignore-weights", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("train", help="train the two-tower embedding model")
    p.add_argument("--interactions", required=True)
    p.add_argument("--tokens", required=True)
    p.add_argument("--partition", help="required for --sampler graph")
    p.add_argument("--sampler", choices=ARMS, default="graph")
    p.add_argument("--window", type=int, default=1)
    p.add_argument("--neg-budget", type=int, default=256)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--steps", type=int, default=None, help="stop after this many minibatches")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump-negatives", action="store_true", help="also write one sampled negative batch")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-router", help="train the cluster classifier on query embeddings")
    p.add_argument("--model-dir", required=True, help="output directory of 'train'")
    p.add_argument("--interactions", required=True)
    p.add_argument("--partition", required=True)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_router)

    p = sub.add_parser("build-index", help="build one search index per cluster")
    p.add_argument("--corpus", required=True, help="document vectors (VEC1)")
    p.add_argument("--doc-ids", required=True, help="id table naming each corpus row")
    p.add_argument("--partition", required=True)
    p.add_argument("--router", required=True)
    p.add_argument("--backend", choices=BACKENDS, default="exact")
    p.add_argument("--cutoff", type=float, default=0.99)
    p.add_argument("--nlist", type=int, default=64)
    p.add_argument("--nprobe", type=int, default=8)
    p.add_argument("--iterations", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("query", help="top-k search for each query vector")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--probes", type=_int_list, default=(8,), help="max probes (largest value is used)")
    p.add_argument("--cutoff", type=float, default=0.99)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("bench", help="recall / latency sweep against brute force")
    p.add_argument("--index", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--probes", type=_int_list, default=(1, 2, 4, 8, 16))
    p.add_argument("--cutoff", type=float, default=0.99)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--machines", type=_int_list, default=(1, 2, 4, 8, 16))
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("schedule", help="simulated multi-machine build makespans")
    p.add_argument("--build-times", required=True, help="TSV whose last column is seconds per job")
    p.add_argument("--machines", type=_int_list, default=(1, 2, 4, 8, 16))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("pipeline", help="run every stage end to end")
    _synth_args(p, full=False)
    p.add_argument("--clusters", type=int, default=16)
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--backend", choices=BACKENDS, default="exact")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window", type=int, default=4)
    p.add_argument("--neg-budget", type=int, default=256)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--probes", type=_int_list, default=(1, 2, 4, 8, 16))
    p.add_argument("--cutoff", type=float, default=0.99)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except InvariantError as e:
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
