"""Cluster router: a two-hidden-layer softmax classifier over clusters.

Given a query embedding it predicts which partitions hold the relevant
documents. ``top_clusters`` turns the distribution into a probe list.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .optim import Adam

log = logging.getLogger(__name__)

RTR_MAGIC = b"RTR1"
LAYERS = ("W1", "b1", "W2", "b2", "W3", "b3")


@dataclass
class RouterModel:
    W1: np.ndarray  # (dim, H)
    b1: np.ndarray
    W2: np.ndarray  # (H, H)
    b2: np.ndarray
    W3: np.ndarray  # (H, r)
    b3: np.ndarray

    @property
    def input_dim(self) -> int:
        return int(self.W1.shape[0])

    @property
    def hidden(self) -> int:
        return int(self.W1.shape[1])

    @property
    def r(self) -> int:
        return int(self.W3.shape[1])

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in LAYERS}

    @classmethod
    def zeros(cls, dim: int, hidden: int, r: int) -> "RouterModel":
        return cls(np.zeros((dim, hidden)), np.zeros(hidden), np.zeros((hidden, hidden)),
                   np.zeros(hidden), np.zeros((hidden, r)), np.zeros(r))

    @classmethod
    def init(cls, dim: int, hidden: int, r: int, rng: np.random.Generator) -> "RouterModel":
        def glorot(a, b):
            lim = np.sqrt(6.0 / (a + b))
            return rng.uniform(-lim, lim, size=(a, b))
        return cls(glorot(dim, hidden), np.zeros(hidden), glorot(hidden, hidden),
                   np.zeros(hidden), glorot(hidden, r), np.zeros(r))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward(m: RouterModel, X: np.ndarray):
    a1 = X @ m.W1 + m.b1
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ m.W2 + m.b2
    h2 = np.maximum(a2, 0.0)
    logits = h2 @ m.W3 + m.b3
    return a1, h1, a2, h2, logits


def predict(model: RouterModel, q: np.ndarray) -> np.ndarray:
    """Cluster probabilities for one embedding (1-D) or a batch (2-D)."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != model.input_dim:
        raise DataError(f"router expects dim {model.input_dim}, got {q.shape[-1]}")
    return _softmax(_forward(model, q)[-1])


def loss_and_grads(model: RouterModel, X: np.ndarray, y: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy and its gradient for every layer."""
    n = X.shape[0]
    a1, h1, a2, h2, logits = _forward(model, X)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -float(logp[np.arange(n), y].mean())
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    g /= n
    grads = {"W3": h2.T @ g, "b3": g.sum(0)}
    g2 = (g @ model.W3.T) * (a2 > 0)
    grads["W2"] = h1.T @ g2
    grads["b2"] = g2.sum(0)
    g1 = (g2 @ model.W2.T) * (a1 > 0)
    grads["W1"] = X.T @ g1
    grads["b1"] = g1.sum(0)
    return loss, grads


def accuracy(model: RouterModel, X: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return 1.0
    return float((predict(model, X).argmax(1) == y).mean())


def topk_coverage(model: RouterModel, X: np.ndarray, y: np.ndarray, k: int) -> float:
    """Fraction of examples whose label is among the k most probable clusters."""
    P = predict(model, X)
    order = np.argsort(-P, axis=1, kind="stable")[:, :k]
    return float((order == y[:, None]).any(axis=1).mean())


def train_router(
    X: np.ndarray,
    y: np.ndarray,
    r: int,
    hidden: int = 64,
    epochs: int = 20,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 256,
) -> tuple[RouterModel, float]:
    """Fit by minibatch Adam on cross-entropy; returns (model, train accuracy)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        raise DataError("router needs at least one training example")
    if y.min() < 0 or y.max() >= r:
        raise DataError(f"router labels must lie in [0, {r})")
    rng = np.random.default_rng(seed)
    model = RouterModel.init(X.shape[1], hidden, r, rng)
    opt = Adam(model.params(), lr=lr)
    n = len(X)
    for epoch in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        for s in range(0, n, batch_size):
            idx = perm[s:s + batch_size]
            loss, grads = loss_and_grads(model, X[idx], y[idx])
            opt.step(grads)
            total += loss * len(idx)
        log.debug("router epoch %d loss %.4f", epoch, total / n)
    return model, accuracy(model, X, y)


def top_clusters(probs: np.ndarray, d: int, t: float) -> list[int]:
    """Probe list: clusters by descending probability (ties to lower id),
    cut at the first prefix whose mass reaches ``t`` and at ``d`` entries.

    A cutoff of 1.0 or more never truncates; floating-point sums can reach
    1.0 early once the tail probabilities underflow, which would otherwise
    drop clusters that still carry mass.
    """
    if d < 1:
        raise DataError("max probes must be >= 1")
    if not 0.0 < t:
        raise DataError("cutoff must be > 0")
    probs = np.asarray(probs, dtype=np.float64)
    order = np.argsort(-probs, kind="stable")[:d]
    if t >= 1.0:
        return order.tolist()
    mass = np.cumsum(probs[order])
    hit = np.flatnonzero(mass >= t - 1e-12)
    stop = int(hit[0]) + 1 if hit.size else len(order)
    return order[:stop].tolist()


def assign_document(model: RouterModel, d_embedding: np.ndarray) -> int:
    return int(np.argmax(predict(model, d_embedding)))


def save_router(path: str | Path, model: RouterModel) -> None:
    """RTR1: magic, u32 input dim, u32 H, u32 r, then W1 b1 W2 b2 W3 b3 as
    row-major little-endian float32."""
    with Path(path).open("wb") as fh:
        fh.write(RTR_MAGIC + struct.pack("<III", model.input_dim, model.hidden, model.r))
        for k in LAYERS:
            fh.write(np.ascontiguousarray(getattr(model, k), dtype="<f4").tobytes())


def load_router(path: str | Path) -> RouterModel:
    path = Path(path)
    if not path.exists():
        raise DataError(f"router checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != RTR_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}")
    dim, H, r = struct.unpack_from("<III", raw, 4)
    shapes = {"W1": (dim, H), "b1": (H,), "W2": (H, H), "b2": (H,), "W3": (H, r), "b3": (r,)}
    off = 16
    arrays = {}
    for k in LAYERS:
        size = int(np.prod(shapes[k]))
        if off + 4 * size > len(raw):
            raise DataError(f"{path}: truncated router checkpoint")
        arrays[k] = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shapes[k]).astype(np.float64)
        off += 4 * size
    return RouterModel(**arrays)
