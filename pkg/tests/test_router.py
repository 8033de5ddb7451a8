import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dyadsearch.errors import DataError
from dyadsearch.router import (RouterModel, accuracy, assign_document, load_router, loss_and_grads, predict,
                               save_router, top_clusters, topk_coverage, train_router)


def blobs(rng, r=8, per=500, dim=16, spread=0.15):
    centres = rng.standard_normal((r, dim))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    y = np.repeat(np.arange(r), per)
    X = centres[y] + rng.standard_normal((len(y), dim)) * spread
    return X, y


def fd_router(model, X, y, h=1e-6):
    _, grads = loss_and_grads(model, X, y)
    out = {}
    for k, W in model.params().items():
        num = np.zeros_like(W)
        for idx in np.ndindex(*W.shape):
            old = W[idx]
            W[idx] = old + h
            lp = loss_and_grads(model, X, y)[0]
            W[idx] = old - h
            lm = loss_and_grads(model, X, y)[0]
            W[idx] = old
            num[idx] = (lp - lm) / (2 * h)
        out[k] = (grads[k], num)
    return out


class TestPredict:
    def test_zero_model_uniform(self):
        np.testing.assert_allclose(predict(RouterModel.zeros(4, 8, 5), np.ones(4)), np.full(5, 0.2))

    def test_sums_to_one(self):
        rng = np.random.default_rng(0)
        m = RouterModel.init(6, 8, 7, rng)
        P = predict(m, rng.standard_normal((50, 6)) * 10)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-6)

    def test_dim_mismatch(self):
        with pytest.raises(DataError):
            predict(RouterModel.zeros(4, 8, 5), np.ones(3))


class TestGradients:
    def test_finite_difference(self):
        rng = np.random.default_rng(1)
        m = RouterModel.init(5, 6, 4, rng)
        m.b1 += 0.1
        m.b2 += 0.1
        X = rng.standard_normal((7, 5))
        y = rng.integers(0, 4, 7)
        for k, (g, num) in fd_router(m, X, y).items():
            np.testing.assert_allclose(g, num, rtol=1e-4, atol=1e-8, err_msg=k)


class TestTrainRouter:
    def test_linearly_separable(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((400, 4))
        y = (X[:, 0] > 0).astype(int)
        _, acc = train_router(X, y, 2, hidden=16, epochs=60, lr=1e-2)
        assert acc >= 0.99

    def test_single_example(self):
        X = np.array([[0.3, -1.0, 2.0]])
        m, acc = train_router(X, np.array([2]), 4, hidden=8, epochs=200)
        assert acc == 1.0
        assert assign_document(m, X[0]) == 2

    def test_blob_holdout(self):
        rng = np.random.default_rng(3)
        X, y = blobs(rng)
        perm = rng.permutation(len(y))
        tr, te = perm[:3000], perm[3000:]
        m, _ = train_router(X[tr], y[tr], 8, epochs=20)
        assert accuracy(m, X[te], y[te]) >= 0.95
        assert topk_coverage(m, X[te], y[te], 8) == 1.0
        docs, dy = blobs(np.random.default_rng(3), per=50)
        hits = np.mean([assign_document(m, d) == c for d, c in zip(docs, dy)])
        assert hits >= 0.95

    def test_shuffled_labels_chance(self):
        rng = np.random.default_rng(4)
        X, y = blobs(rng)
        y = rng.permutation(y)
        m, _ = train_router(X[:3000], y[:3000], 8, epochs=10)
        assert abs(accuracy(m, X[3000:], y[3000:]) - 1 / 8) < 0.04

    def test_single_class(self):
        _, acc = train_router(np.ones((5, 2)), np.zeros(5, dtype=int), 1, hidden=4, epochs=2)
        assert acc == 1.0

    def test_label_range(self):
        with pytest.raises(DataError):
            train_router(np.ones((2, 2)), np.array([0, 3]), 3)


class TestTopClusters:
    def test_mass_cutoff(self):
        assert top_clusters(np.array([0.7, 0.25, 0.04, 0.01]), 4, 0.9) == [0, 1]

    def test_probe_cap(self):
        assert top_clusters(np.full(4, 0.25), 2, 0.99) == [0, 1]

    def test_full_cutoff_never_truncates(self):
        p = np.array([1.0 - 1e-17, 1e-17, 0.0])
        assert top_clusters(p, 3, 1.0) == [0, 1, 2]

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 10_000), d=st.integers(1, 8), t=st.floats(0.05, 0.999))
    def test_sort_then_scan(self, seed, d, t):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.ones(8))
        order = sorted(range(8), key=lambda i: (-p[i], i))
        out, mass = [], 0.0
        for c in order[:d]:
            out.append(c)
            mass += p[c]
            if mass >= t:
                break
        assert top_clusters(p, d, t) == out

    def test_bad_args(self):
        with pytest.raises(DataError):
            top_clusters(np.ones(2) / 2, 0, 0.5)


class TestAssign:
    def test_zero_model_lowest_id(self):
        assert assign_document(RouterModel.zeros(3, 4, 5), np.ones(3)) == 0

    def test_shared_bias_shift_invariant(self):
        rng = np.random.default_rng(5)
        m = RouterModel.init(4, 8, 6, rng)
        docs = rng.standard_normal((30, 4))
        before = [assign_document(m, d) for d in docs]
        m.b3 = m.b3 + 3.7
        assert [assign_document(m, d) for d in docs] == before


def test_checkpoint_roundtrip(tmp_path):
    m = RouterModel.init(5, 6, 3, np.random.default_rng(6))
    save_router(tmp_path / "r.rtr", m)
    raw = (tmp_path / "r.rtr").read_bytes()
    assert raw[:4] == b"RTR1"
    assert len(raw) == 16 + 4 * (5 * 6 + 6 + 36 + 6 + 18 + 3)
    n = load_router(tmp_path / "r.rtr")
    for k, v in m.params().items():
        np.testing.assert_array_equal(getattr(n, k), v.astype(np.float32))


def test_checkpoint_truncated(tmp_path):
    save_router(tmp_path / "r.rtr", RouterModel.zeros(2, 2, 2))
    (tmp_path / "r.rtr").write_bytes((tmp_path / "r.rtr").read_bytes()[:-4])
    with pytest.raises(DataError):
        load_router(tmp_path / "r.rtr")
