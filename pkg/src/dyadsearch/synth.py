"""Planted-topic synthetic dyadic data.

Queries and documents each belong to one of ``topics`` blocks. Intra-topic
pairs become purchase edges with probability ``p_in`` and cross-topic pairs
with ``p_out``, giving a block-diagonal co-occurrence matrix. Topics can be
grouped into families of ``family_size``; sibling topics share a token pool
and connect with probability ``p_family``, which is what makes hard
negatives informative.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .graph import InteractionRecord, write_id_table, write_interactions


@dataclass(frozen=True)
class SynthConfig:
    topics: int = 8
    queries_per_topic: int = 50
    docs_per_topic: int = 50
    p_in: float = 0.3
    p_out: float = 0.01
    topic_pool: int = 20
    noise_pool: int = 50
    query_tokens: int = 3
    doc_tokens: int = 8
    topic_token_prob: float = 0.8
    family_size: int = 1
    p_family: float | None = None
    family_pool: int = 20
    family_token_prob: float = 0.0
    heldout_fraction: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.topics < 1:
            raise DataError("topics must be >= 1")
        if not (0.0 <= self.p_out < self.p_in <= 1.0):
            raise DataError("need 0 <= p_out < p_in <= 1")
        if self.p_family is not None and not (0.0 <= self.p_family <= 1.0):
            raise DataError("p_family must lie in [0, 1]")
        if self.family_size < 1 or self.topics % self.family_size:
            raise DataError("family_size must divide topics")
        if self.queries_per_topic < 1 or self.docs_per_topic < 1:
            raise DataError("need at least one query and one doc per topic")
        if not (0.0 <= self.heldout_fraction < 1.0):
            raise DataError("heldout_fraction must lie in [0, 1)")
        if self.topic_token_prob + self.family_token_prob > 1.0:
            raise DataError("token source probabilities exceed 1")


@dataclass
class SynthData:
    config: SynthConfig
    query_ids: list[str]
    doc_ids: list[str]
    query_topic: np.ndarray
    doc_topic: np.ndarray
    records: list[InteractionRecord]
    heldout_records: list[InteractionRecord]
    query_tokens: dict[str, list[str]]
    doc_tokens: dict[str, list[str]]

    def labels(self) -> dict[str, int]:
        out = {f"q:{q}": int(t) for q, t in zip(self.query_ids, self.query_topic)}
        out.update({f"d:{d}": int(t) for d, t in zip(self.doc_ids, self.doc_topic)})
        return out

    def heldout_queries(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.heldout_records:
            seen.setdefault(r.query_id, None)
        return list(seen)


def _edge_prob(cfg: SynthConfig, a: int, b: int) -> float:
    if a == b:
        return cfg.p_in
    if cfg.p_family is not None and a // cfg.family_size == b // cfg.family_size:
        return cfg.p_family
    return cfg.p_out


def _draw_tokens(rng, cfg: SynthConfig, topic: int, count: int) -> list[str]:
    family = topic // cfg.family_size
    u = rng.random(count)
    out = []
    for x in u:
        if x < cfg.topic_token_prob:
            out.append(f"t{topic}_{rng.integers(cfg.topic_pool)}")
        elif x < cfg.topic_token_prob + cfg.family_token_prob:
            out.append(f"f{family}_{rng.integers(cfg.family_pool)}")
        else:
            out.append(f"n{rng.integers(cfg.noise_pool)}")
    return out


def generate(cfg: SynthConfig) -> SynthData:
    """Sample a planted dataset; deterministic in ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    B, nq, nd = cfg.topics, cfg.queries_per_topic, cfg.docs_per_topic
    query_topic = np.repeat(np.arange(B), nq)
    doc_topic = np.repeat(np.arange(B), nd)
    query_ids = [f"q{i:06d}" for i in range(B * nq)]
    doc_ids = [f"d{j:06d}" for j in range(B * nd)]

    pairs = []
    for a in range(B):
        for b in range(B):
            p = _edge_prob(cfg, a, b)
            if p <= 0:
                continue
            n_pairs = nq * nd
            k = int(rng.binomial(n_pairs, p))
            if k == 0:
                continue
            flat = np.sort(rng.choice(n_pairs, size=k, replace=False))
            pairs.append(np.stack([a * nq + flat // nd, b * nd + flat % nd], axis=1))
    if not pairs:
        raise DataError("configuration produced zero edges")
    edges = np.concatenate(pairs)
    edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]
    weights = rng.geometric(0.5, size=len(edges))

    heldout = np.zeros(B * nq, dtype=bool)
    if cfg.heldout_fraction > 0:
        n_hold = int(round(cfg.heldout_fraction * nq))
        for a in range(B):
            pick = rng.choice(nq, size=n_hold, replace=False)
            heldout[a * nq + pick] = True

    records, held_records = [], []
    for (qi, dj), w in zip(edges.tolist(), weights.tolist()):
        rec = InteractionRecord(query_ids[qi], doc_ids[dj], int(w))
        (held_records if heldout[qi] else records).append(rec)
    if not records:
        raise DataError("configuration produced zero training edges")

    qtok = {q: _draw_tokens(rng, cfg, int(t), cfg.query_tokens) for q, t in zip(query_ids, query_topic)}
    dtok = {d: _draw_tokens(rng, cfg, int(t), cfg.doc_tokens) for d, t in zip(doc_ids, doc_topic)}
    return SynthData(cfg, query_ids, doc_ids, query_topic, doc_topic, records, held_records, qtok, dtok)


def write_synth(data: SynthData, out_dir: str | Path) -> dict[str, Path]:
    """Write interactions, held-out interactions, tokens, labels and id tables."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "interactions": out / "interactions.tsv",
        "heldout": out / "heldout.tsv",
        "tokens": out / "tokens.tsv",
        "labels": out / "labels.tsv",
        "queries": out / "queries.txt",
        "docs": out / "docs.txt",
        "config": out / "synth_config.tsv",
    }
    write_interactions(paths["interactions"], data.records)
    write_interactions(paths["heldout"], data.heldout_records)
    write_tokens(paths["tokens"], data.query_tokens, data.doc_tokens)
    with paths["labels"].open("w", encoding="utf-8", newline="\n") as fh:
        for key, topic in data.labels().items():
            fh.write(f"{key}\t{topic}\n")
    write_id_table(paths["queries"], data.query_ids)
    write_id_table(paths["docs"], data.doc_ids)
    with paths["config"].open("w", encoding="utf-8", newline="\n") as fh:
        for k, v in asdict(data.config).items():
            fh.write(f"{k}\t{v}\n")
    return paths


def write_tokens(path, query_tokens: dict[str, list[str]], doc_tokens: dict[str, list[str]]) -> None:
    """Tokenizations as ``q|d<TAB>entity_id<TAB>space separated tokens``."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for q, toks in query_tokens.items():
            fh.write(f"q\t{q}\t{' '.join(toks)}\n")
        for d, toks in doc_tokens.items():
            fh.write(f"d\t{d}\t{' '.join(toks)}\n")


def read_tokens(path) -> tuple[dict[str, list[str]], dict[str, list[str]]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"tokens file not found: {path}")
    queries: dict[str, list[str]] = {}
    docs: dict[str, list[str]] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 3 or cols[0] not in ("q", "d"):
                raise DataError(f"{path}:{lineno}: expected 'q|d<TAB>id<TAB>tokens'")
            toks = cols[2].split()
            if not toks:
                raise DataError(f"{path}:{lineno}: empty token list")
            (queries if cols[0] == "q" else docs)[cols[1]] = toks
    return queries, docs


# --------------------------------------------------------------------------
# planted vector corpora for search experiments


@dataclass
class PlantedVectors:
    docs: np.ndarray          # (m, dim) float32, unit rows
    doc_cluster: np.ndarray   # (m,) fine cluster id in [0, blocks * clusters_per_block)
    queries: np.ndarray       # (n, dim) float32, unit rows
    query_cluster: np.ndarray


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def planted_vectors(
    n_docs: int,
    n_queries: int,
    dim: int = 32,
    blocks: int = 8,
    clusters_per_block: int = 8,
    block_spread: float = 0.5,
    cluster_spread: float = 1.0,
    seed: int = 0,
) -> PlantedVectors:
    """Hierarchical Gaussian blobs on the unit sphere.

    Each of ``blocks`` block centres has ``clusters_per_block`` fine cluster
    centres scattered around it; points scatter around their fine centre.
    Spreads are per-coordinate standard deviations scaled by ``1/sqrt(dim)``.
    """
    rng = np.random.default_rng(seed)
    r = blocks * clusters_per_block
    block_centres = _unit(rng.standard_normal((blocks, dim)))
    fine = np.repeat(block_centres, clusters_per_block, axis=0)
    fine = _unit(fine + rng.standard_normal((r, dim)) * block_spread / np.sqrt(dim))

    def draw(n):
        lab = np.sort(rng.integers(r, size=n))
        x = fine[lab] + rng.standard_normal((n, dim)) * cluster_spread / np.sqrt(dim)
        return _unit(x).astype(np.float32), lab.astype(np.int64)

    docs, dl = draw(n_docs)
    queries, ql = draw(n_queries)
    return PlantedVectors(docs, dl, queries, ql)
