"""Factorized (two-tower) embedding model with a shared token table.

An entity is embedded as the L2-normalised mean of its token rows, so the
similarity of a (query, document) pair is a cosine in [-1, 1]. Training
minimises the squared hinge loss with thresholds ``t1`` (positives) and
``t2`` (negatives) using Adam.
"""

from __future__ import annotations

import hashlib
import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DataError, InvariantError
from .optim import Adam

log = logging.getLogger(__name__)

EMB_MAGIC = b"EMB1"


def stable_hash(s: str) -> int:
    """Deterministic 64-bit string hash (Python's ``hash`` is salted)."""
    return int.from_bytes(hashlib.blake2b(s.encode("utf-8"), digest_size=8).digest(), "little")


@dataclass
class TokenVocab:
    """Frequent unigrams get their own rows; everything else hashes into
    ``oov_bins`` shared rows. Optional word bigrams use the same lookup."""

    tokens: dict[str, int]
    unigram_capacity: int = 2000
    oov_bins: int = 500
    bigrams: bool = False

    @classmethod
    def build(cls, token_lists, unigram_capacity: int = 2000, oov_bins: int = 500,
              bigrams: bool = False) -> "TokenVocab":
        counts: Counter[str] = Counter()
        for toks in token_lists:
            counts.update(toks)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:unigram_capacity]
        return cls({t: i for i, (t, _) in enumerate(ranked)}, unigram_capacity, oov_bins, bigrams)

    @property
    def size(self) -> int:
        return self.unigram_capacity + self.oov_bins

    def index(self, token: str) -> int:
        i = self.tokens.get(token)
        if i is not None:
            return i
        return self.unigram_capacity + stable_hash(token) % self.oov_bins

    def featurize(self, tokens: Sequence[str]) -> list[int]:
        feats = [self.index(t) for t in tokens]
        if self.bigrams:
            feats += [self.index(f"{a} {b}") for a, b in zip(tokens, tokens[1:])]
        return feats

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"#unigram_capacity={self.unigram_capacity} oov_bins={self.oov_bins} bigrams={int(self.bigrams)}\n")
            for t, i in sorted(self.tokens.items(), key=lambda kv: kv[1]):
                fh.write(f"{t}\t{i}\n")

    @classmethod
    def load(cls, path: str | Path) -> "TokenVocab":
        path = Path(path)
        if not path.exists():
            raise DataError(f"vocab file not found: {path}")
        lines = path.read_text(encoding="utf-8").splitlines()
        header = dict(tok.split("=", 1) for tok in lines[0].lstrip("#").split())
        tokens = {}
        for line in lines[1:]:
            t, i = line.split("\t")
            tokens[t] = int(i)
        return cls(tokens, int(header["unigram_capacity"]), int(header["oov_bins"]), bool(int(header["bigrams"])))


@dataclass
class ModelParams:
    table: np.ndarray       # (vocab size, dim), shared by both towers
    vocab: TokenVocab

    @property
    def dim(self) -> int:
        return int(self.table.shape[1])

    @classmethod
    def init(cls, vocab: TokenVocab, dim: int, rng: np.random.Generator) -> "ModelParams":
        lim = math.sqrt(6.0 / (vocab.size + dim))
        return cls(rng.uniform(-lim, lim, size=(vocab.size, dim)), vocab)


def encode(tokens: Sequence[str], params: ModelParams) -> np.ndarray:
    """Unit-norm mean of the token rows."""
    if len(tokens) == 0:
        raise DataError("cannot encode an empty token list")
    m = params.table[params.vocab.featurize(tokens)].mean(axis=0)
    n = np.linalg.norm(m)
    if n == 0:
        raise InvariantError("token rows average to the zero vector")
    return m / n


def feature_matrix(token_lists: Sequence[Sequence[str]], vocab: TokenVocab) -> sp.csr_matrix:
    """Sparse averaging operator: row i holds weight count/len on token rows."""
    indptr = [0]
    indices: list[int] = []
    data: list[float] = []
    for toks in token_lists:
        feats = vocab.featurize(toks)
        if not feats:
            raise DataError("cannot encode an empty token list")
        indices.extend(feats)
        data.extend([1.0 / len(feats)] * len(feats))
        indptr.append(len(indices))
    M = sp.csr_matrix((data, indices, indptr), shape=(len(token_lists), vocab.size))
    M.sum_duplicates()
    return M


def encode_matrix(M: sp.csr_matrix, table: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(unit embeddings, raw means, norms) for every row of ``M``."""
    means = np.asarray(M @ table)
    norms = np.linalg.norm(means, axis=1)
    if np.any(norms == 0):
        raise InvariantError("token rows average to the zero vector")
    return means / norms[:, None], means, norms


def squared_hinge_loss(y_hat, y, t1: float = 0.9, t2: float = 0.2):
    """``y * min(0, y_hat - t1)**2 + (1 - y) * max(0, y_hat - t2)**2``."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = y * np.minimum(0.0, y_hat - t1) ** 2 + (1.0 - y) * np.maximum(0.0, y_hat - t2) ** 2
    return out if out.ndim else float(out)


def loss_grad(y_hat, y, t1: float = 0.9, t2: float = 0.2):
    """d(loss)/d(y_hat); the subgradient at either kink is 0."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y)
    out = np.where(y == 1,
                   np.where(y_hat < t1, 2.0 * (y_hat - t1), 0.0),
                   np.where(y_hat > t2, 2.0 * (y_hat - t2), 0.0))
    return out if out.ndim else float(out)


def batch_loss_and_grad(
    table: np.ndarray,
    Mq: sp.csr_matrix,
    Md: sp.csr_matrix,
    y: np.ndarray,
    t1: float,
    t2: float,
) -> tuple[float, np.ndarray]:
    """Mean pair loss over a batch and its gradient w.r.t. the shared table.

    Row i of ``Mq`` / ``Md`` averages the tokens of the i-th pair's query /
    document.
    """
    uq, _, nq = encode_matrix(Mq, table)
    ud, _, nd = encode_matrix(Md, table)
    y_hat = (uq * ud).sum(axis=1)
    n = len(y)
    loss = float(squared_hinge_loss(y_hat, y, t1, t2).sum() / n)
    g = loss_grad(y_hat, y, t1, t2) / n
    # d y_hat / d mean_q = (I - uq uq^T) ud / |mean_q|, symmetric for docs
    gq = g[:, None] * (ud - uq * y_hat[:, None]) / nq[:, None]
    gd = g[:, None] * (uq - ud * y_hat[:, None]) / nd[:, None]
    grad = np.asarray(Mq.T @ gq) + np.asarray(Md.T @ gd)
    return loss, grad


@dataclass
class TrainConfig:
    dim: int = 32
    batch_size: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    t1: float = 0.9
    t2: float = 0.2
    epochs: int = 10
    seed: int = 0
    max_steps: int | None = None
    unigram_capacity: int = 2000
    oov_bins: int = 500
    bigrams: bool = False

    def __post_init__(self):
        if not 0.0 <= self.t2 < self.t1 <= 1.0:
            raise DataError("need 0 <= t2 < t1 <= 1")
        if self.batch_size < 1 or self.dim < 1:
            raise DataError("batch size and dim must be positive")


@dataclass
class PairDataset:
    """Positive pairs over dense query / doc indices plus their tokens."""

    pairs: np.ndarray                      # (n, 2) int64: query index, doc index
    query_tokens: list[list[str]]
    doc_tokens: list[list[str]]

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if len(self.pairs) == 0:
            raise DataError("training needs at least one positive pair")


@dataclass
class TrainResult:
    params: ModelParams
    epoch_losses: list[float] = field(default_factory=list)
    curve: list[tuple[int, object]] = field(default_factory=list)
    steps: int = 0


def train(
    data: PairDataset,
    cfg: TrainConfig,
    sampler=None,
    vocab: TokenVocab | None = None,
    eval_every: int = 0,
    evaluator: Callable[[ModelParams], object] | None = None,
) -> TrainResult:
    """Minibatch Adam over positives plus sampler-provided negatives.

    ``sampler`` needs a ``sample(queries, rng)`` method returning (query,
    doc) index pairs; ``None`` trains on positives only. With
    ``eval_every`` and ``evaluator`` set, the evaluator's output is recorded
    every that many steps and after the last step.
    """
    rng = np.random.default_rng(cfg.seed)
    if vocab is None:
        vocab = TokenVocab.build(list(data.query_tokens) + list(data.doc_tokens),
                                 cfg.unigram_capacity, cfg.oov_bins, cfg.bigrams)
    params = ModelParams.init(vocab, cfg.dim, rng)
    Fq = feature_matrix(data.query_tokens, vocab)
    Fd = feature_matrix(data.doc_tokens, vocab)
    opt = Adam({"table": params.table}, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_adam)
    result = TrainResult(params)
    n = len(data.pairs)
    step = 0
    done = False
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        total, count = 0.0, 0
        for s in range(0, n, cfg.batch_size):
            pos = data.pairs[perm[s:s + cfg.batch_size]]
            qs = np.unique(pos[:, 0])
            neg = np.asarray(sampler.sample(qs, rng), dtype=np.int64).reshape(-1, 2) if sampler else np.empty((0, 2), np.int64)
            batch = np.concatenate([pos, neg])
            y = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
            loss, grad = batch_loss_and_grad(params.table, Fq[batch[:, 0]], Fd[batch[:, 1]], y, cfg.t1, cfg.t2)
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise InvariantError(
                    f"training diverged at epoch {epoch} step {step}: loss={loss}, "
                    f"max |table|={np.abs(params.table).max():.3g}, lr={cfg.lr}"
                )
            opt.step({"table": grad})
            total += loss * len(batch)
            count += len(batch)
            step += 1
            if eval_every and evaluator and step % eval_every == 0:
                result.curve.append((step, evaluator(params)))
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
        result.epoch_losses.append(total / max(count, 1))
        log.info("epoch %d loss %.6f", epoch, result.epoch_losses[-1])
        if done:
            break
    result.steps = step
    if evaluator and (not result.curve or result.curve[-1][0] != step):
        result.curve.append((step, evaluator(params)))
    return result


def embed_all(token_lists: Sequence[Sequence[str]], params: ModelParams) -> np.ndarray:
    return encode_matrix(feature_matrix(token_lists, params.vocab), params.table)[0]


def average_precision(ranked: Sequence[int], relevant: set[int], k: int) -> float:
    hits, acc = 0, 0.0
    for i, item in enumerate(ranked[:k], start=1):
        if item in relevant:
            hits += 1
            acc += hits / i
    return acc / min(len(relevant), k)


def evaluate_matching(
    params: ModelParams,
    eval_queries: dict[int, set[int]],
    query_tokens: Sequence[Sequence[str]],
    corpus_tokens: Sequence[Sequence[str]],
    k: int = 100,
    query_vecs: np.ndarray | None = None,
    corpus_vecs: np.ndarray | None = None,
) -> tuple[float, float, int]:
    """(Matching MAP@k, Matching Recall@k, skipped query count).

    ``eval_queries`` maps a query index to the corpus indices it purchased;
    queries with no purchases are skipped and counted.
    """
    if corpus_vecs is None:
        corpus_vecs = embed_all(corpus_tokens, params)
    qids = [q for q, rel in eval_queries.items() if rel]
    skipped = len(eval_queries) - len(qids)
    if not qids:
        return 0.0, 0.0, skipped
    if query_vecs is None:
        query_vecs = embed_all([query_tokens[q] for q in qids], params)
    else:
        query_vecs = query_vecs[qids]
    scores = query_vecs @ corpus_vecs.T
    aps, recalls = [], []
    ids = np.arange(corpus_vecs.shape[0])
    for row, q in zip(scores, qids):
        rel = eval_queries[q]
        ranked = np.lexsort((ids, -row))[:k].tolist()
        aps.append(average_precision(ranked, rel, k))
        recalls.append(len(rel.intersection(ranked)) / len(rel))
    return float(np.mean(aps)), float(np.mean(recalls)), skipped


def save_params(path: str | Path, params: ModelParams) -> None:
    """EMB1: magic, u32 vocab size, u32 dim, row-major little-endian float32."""
    with Path(path).open("wb") as fh:
        fh.write(EMB_MAGIC + struct.pack("<II", *params.table.shape))
        fh.write(np.ascontiguousarray(params.table, dtype="<f4").tobytes())


def load_params(path: str | Path, vocab: TokenVocab) -> ModelParams:
    path = Path(path)
    if not path.exists():
        raise DataError(f"model checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != EMB_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}")
    v, dim = struct.unpack_from("<II", raw, 4)
    if v != vocab.size:
        raise DataError(f"{path}: table has {v} rows, vocab expects {vocab.size}")
    if len(raw) != 12 + 4 * v * dim:
        raise DataError(f"{path}: truncated checkpoint")
    table = np.frombuffer(raw, dtype="<f4", offset=12).reshape(v, dim).astype(np.float64)
    return ModelParams(table, vocab)
