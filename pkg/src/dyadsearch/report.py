"""Recall / latency / build-time benchmark and its reports.

Every configuration is measured query by query against an exact
brute-force oracle. Results go to a TSV, an aligned text table and a few
matplotlib figures.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError
from .knn import ExactIndex, IVFParams, VectorSet, brute_force_search, ivf_build
from .pnns import PartitionedIndex, pnns_query, recall_at_k
from .schedule import simulate_build, write_schedule_tsv

WARMUP_QUERIES = 10
# columns / files whose values depend on wall-clock time
TIMING_COLUMNS = ("latency_mean_ms", "latency_p50_ms", "latency_p99_ms", "build_seconds", "makespans")
TIMING_FILES = ("bench.txt", "latency_vs_probes.png", "makespan_vs_machines.png",
                "schedule.tsv", "build_times.tsv", "timings.tsv")


@dataclass
class BenchRow:
    mode: str              # "pnns" or "flat" (one unpartitioned index)
    backend: str
    probes: int
    cutoff: float
    recall: float
    mean_probes: float
    latency_mean_ms: float
    latency_p50_ms: float
    latency_p99_ms: float
    build_seconds: float
    makespans: str = ""


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)
    schedule: list[tuple[int, float]] = field(default_factory=list)
    k: int = 100
    n_queries: int = 0

    def check(self) -> None:
        for row in self.rows:
            if not 0.0 <= row.recall <= 1.0:
                raise DataError(f"recall {row.recall} outside [0, 1]")


def _latency_stats(samples: list[float]) -> tuple[float, float, float]:
    a = np.asarray(samples) * 1e3
    return float(a.mean()), float(np.percentile(a, 50)), float(np.percentile(a, 99))


def exact_neighbours(corpus: VectorSet, queries: np.ndarray, k: int) -> list[np.ndarray]:
    """Exact top-k ids for every query; ``corpus`` must hold unit rows."""
    return [brute_force_search(corpus, q, k).ids for q in queries]


def _timed(fn, queries, warmup):
    for q in queries[:warmup]:
        fn(q)
    out, lat = [], []
    for q in queries:
        t0 = time.perf_counter()
        res = fn(q)
        lat.append(time.perf_counter() - t0)
        out.append(res)
    return out, lat


def run_bench(
    corpus: VectorSet,
    queries: np.ndarray,
    index: PartitionedIndex,
    probes: Sequence[int],
    k: int = 100,
    cutoff: float = 0.99,
    machines: Sequence[int] = (1, 2, 4, 8, 16),
    flat_baseline: bool = True,
    warmup: int = WARMUP_QUERIES,
) -> BenchReport:
    """Measure PNNS at each probe count (plus an unpartitioned baseline).

    ``corpus`` is the full normalised corpus used for the exact oracle.
    Latency covers the search call only; queries run one at a time.
    """
    queries = np.asarray(queries, dtype=np.float32)
    if queries.ndim != 2 or len(queries) == 0:
        raise DataError("benchmark needs at least one query vector")
    if queries.shape[1] != corpus.dim:
        raise DataError(f"query dim {queries.shape[1]} != corpus dim {corpus.dim}")
    exact = exact_neighbours(corpus, queries, k)
    total_build = float(sum(index.build_seconds))
    sched = simulate_build(index.build_seconds, machines)
    mk = ",".join(f"{m}:{t:.4f}" for m, t in sched)
    report = BenchReport(schedule=sched, k=k, n_queries=len(queries))

    if flat_baseline:
        t0 = time.perf_counter()
        if index.backend == "ivf":
            p = index.ivf_params or IVFParams()
            nlist = min(p.nlist, corpus.count)
            flat = ivf_build(corpus, IVFParams(nlist, min(p.nprobe, nlist), p.iterations, p.seed))
        else:
            flat = ExactIndex.build(corpus)
        flat_build = time.perf_counter() - t0
        res, lat = _timed(lambda q: flat.search(q, k), queries, warmup)
        recall = float(np.mean([recall_at_k(h.ids, e) for h, e in zip(res, exact)]))
        report.rows.append(BenchRow("flat", index.backend, 0, 1.0, recall, 0.0,
                                    *_latency_stats(lat), flat_build, f"1:{flat_build:.4f}"))

    for d in probes:
        used: list[list[int]] = []
        res, lat = _timed(lambda q: pnns_query(index, q, k, d, cutoff), queries, warmup)
        for q in queries:
            pnns_query(index, q, 1, d, cutoff, probes_out=used)
        recall = float(np.mean([recall_at_k(h.ids, e) for h, e in zip(res, exact)]))
        mean_probes = float(np.mean([len(u) for u in used]))
        report.rows.append(BenchRow("pnns", index.backend, int(d), float(cutoff), recall, mean_probes,
                                    *_latency_stats(lat), total_build, mk))
    report.check()
    return report


# --------------------------------------------------------------------------
# output


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_bench_tsv(path: str | Path, report: BenchReport) -> None:
    names = [f.name for f in fields(BenchRow)]
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(names) + "\n")
        for row in report.rows:
            fh.write("\t".join(_fmt(getattr(row, n)) for n in names) + "\n")


def read_bench_tsv(path: str | Path) -> list[dict[str, str]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    head = lines[0].split("\t")
    return [dict(zip(head, line.split("\t"))) for line in lines[1:]]


def strip_timing(tsv_text: str) -> str:
    """Drop wall-clock columns so two runs can be compared byte for byte."""
    lines = tsv_text.splitlines()
    if not lines:
        return ""
    head = lines[0].split("\t")
    keep = [i for i, h in enumerate(head) if h not in TIMING_COLUMNS]
    return "\n".join("\t".join(line.split("\t")[i] for i in keep) for line in lines) + "\n"


def format_bench_text(report: BenchReport) -> str:
    head = ["mode", "backend", "probes", "cutoff", f"recall@{report.k}", "avg probes",
            "lat mean ms", "lat p50 ms", "lat p99 ms", "build s"]
    body = [[r.mode, r.backend, str(r.probes) if r.mode == "pnns" else "-", f"{r.cutoff:.2f}",
             f"{r.recall:.4f}", f"{r.mean_probes:.2f}", f"{r.latency_mean_ms:.3f}",
             f"{r.latency_p50_ms:.3f}", f"{r.latency_p99_ms:.3f}", f"{r.build_seconds:.3f}"]
            for r in report.rows]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in [head, *body]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    out = [f"{report.n_queries} queries, k={report.k}", *lines]
    if report.schedule:
        out += ["", "simulated multi-machine build (LPT):", "machines  makespan s"]
        out += [f"{m:8d}  {t:10.4f}" for m, t in report.schedule]
    return "\n".join(out) + "\n"


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path: Path) -> None:
    # no Software/date metadata so identical figures are identical files
    fig.savefig(path, dpi=100, metadata={"Software": None})


def plot_recall(report: BenchReport, path: str | Path) -> None:
    plt = _pyplot()
    rows = [r for r in report.rows if r.mode == "pnns"]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([r.probes for r in rows], [r.recall for r in rows], marker="o", label="PNNS")
    for r in report.rows:
        if r.mode == "flat":
            ax.axhline(r.recall, color="grey", ls="--", lw=1, label=f"flat {r.backend}")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("probes")
    ax.set_ylabel(f"recall@{report.k}")
    ax.set_ylim(0, 1.02)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower right")
    fig.tight_layout()
    _save(fig, Path(path))
    plt.close(fig)


def plot_latency(report: BenchReport, path: str | Path) -> None:
    plt = _pyplot()
    rows = [r for r in report.rows if r.mode == "pnns"]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    x = [r.probes for r in rows]
    ax.plot(x, [r.latency_mean_ms for r in rows], marker="o", label="mean")
    ax.plot(x, [r.latency_p99_ms for r in rows], marker="s", ls=":", label="p99")
    for r in report.rows:
        if r.mode == "flat":
            ax.axhline(r.latency_mean_ms, color="grey", ls="--", lw=1, label=f"flat {r.backend}")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("probes")
    ax.set_ylabel("latency (ms)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    _save(fig, Path(path))
    plt.close(fig)


def plot_makespan(schedule: list[tuple[int, float]], path: str | Path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([m for m, _ in schedule], [t for _, t in schedule], marker="o")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("machines")
    ax.set_ylabel("simulated build makespan (s)")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    _save(fig, Path(path))
    plt.close(fig)


def write_bench_outputs(report: BenchReport, out_dir: str | Path, plots: bool = True) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"tsv": out / "bench.tsv", "text": out / "bench.txt", "schedule": out / "schedule.tsv"}
    write_bench_tsv(paths["tsv"], report)
    paths["text"].write_text(format_bench_text(report), encoding="utf-8")
    write_schedule_tsv(paths["schedule"], report.schedule)
    if plots:
        paths["recall_plot"] = out / "recall_vs_probes.png"
        paths["latency_plot"] = out / "latency_vs_probes.png"
        plot_recall(report, paths["recall_plot"])
        plot_latency(report, paths["latency_plot"])
        if report.schedule:
            paths["makespan_plot"] = out / "makespan_vs_machines.png"
            plot_makespan(report.schedule, paths["makespan_plot"])
    return paths
