import numpy as np
import pytest

from dyadsearch.errors import DataError
from dyadsearch.knn import ExactIndex, IVFParams, VectorSet, brute_force_search, normalize_rows
from dyadsearch.pnns import (build_partitioned, load_partitioned, pnns_query, probe_list, recall_at_k,
                             save_partitioned)
from dyadsearch.router import RouterModel, predict, train_router
from dyadsearch.schedule import simulate_build
from dyadsearch.synth import planted_vectors


def corpus(rng, m=300, dim=8):
    """Raw vectors; indexes normalise them once at build time."""
    return VectorSet(np.arange(m, dtype=np.uint64), rng.standard_normal((m, dim)))


class TestBuild:
    def test_single_cluster_is_whole_corpus(self):
        rng = np.random.default_rng(0)
        vs = corpus(rng)
        ix = build_partitioned(vs, np.zeros(vs.count, dtype=int), 1, RouterModel.zeros(8, 4, 1))
        whole = ExactIndex.build(vs)
        np.testing.assert_array_equal(ix.indexes[0].vectors.vectors, whole.vectors.vectors)
        q = vs.vectors[5]
        np.testing.assert_array_equal(pnns_query(ix, q, 20, 1, 0.99).ids, whole.search(q, 20).ids)

    def test_split_conserves_documents(self):
        vs = corpus(np.random.default_rng(1), m=100)
        labels = np.array([0] * 60 + [1] * 40)
        ix = build_partitioned(vs, labels, 2, RouterModel.zeros(8, 4, 2))
        assert ix.cluster_sizes() == [60, 40]
        ids = np.concatenate([ix.cluster_ids(0), ix.cluster_ids(1)])
        assert sorted(ids.tolist()) == list(range(100))

    def test_build_times_feed_scheduler(self):
        vs = corpus(np.random.default_rng(2), m=400)
        ix = build_partitioned(vs, np.arange(400) % 4, 4, RouterModel.zeros(8, 4, 4), backend="ivf",
                               ivf_params=IVFParams(nlist=4, nprobe=2), jobs=2)
        assert len(ix.build_seconds) == 4
        assert sum(ix.build_seconds) >= max(ix.build_seconds)
        assert simulate_build(ix.build_seconds, [1])[0][1] == pytest.approx(sum(ix.build_seconds))

    def test_empty_cluster_allowed(self):
        vs = corpus(np.random.default_rng(3), m=10)
        ix = build_partitioned(vs, np.zeros(10, dtype=int), 3, RouterModel.zeros(8, 4, 3))
        assert ix.cluster_sizes() == [10, 0, 0]
        assert len(pnns_query(ix, vs.vectors[0], 5, 3, 1.0)) == 5

    def test_validation(self):
        vs = corpus(np.random.default_rng(4), m=10)
        with pytest.raises(DataError):
            build_partitioned(vs, np.zeros(9, dtype=int), 1, RouterModel.zeros(8, 4, 1))
        with pytest.raises(DataError):
            build_partitioned(vs, np.zeros(10, dtype=int), 2, RouterModel.zeros(8, 4, 1))
        with pytest.raises(DataError):
            build_partitioned(vs, np.zeros(10, dtype=int), 1, RouterModel.zeros(8, 4, 1), backend="hnsw")


class TestQuery:
    def setup_method(self):
        rng = np.random.default_rng(5)
        self.vs = corpus(rng, m=500)
        self.labels = rng.integers(0, 5, 500)
        self.router = RouterModel.init(8, 8, 5, rng)
        self.ix = build_partitioned(self.vs, self.labels, 5, self.router)
        self.qs = normalize_rows(rng.standard_normal((20, 8)))

    def test_full_probe_is_exact(self):
        for q in self.qs:
            a, b = pnns_query(self.ix, q, 30, 5, 1.0), brute_force_search(self.vs.normalized(), q, 30)
            np.testing.assert_array_equal(a.ids, b.ids)
            np.testing.assert_array_equal(a.scores, b.scores)

    def test_single_probe_stays_in_argmax(self):
        for q in self.qs:
            top = int(np.argmax(predict(self.router, q)))
            hits = pnns_query(self.ix, q, 10, 1, 0.99)
            assert set(self.labels[hits.ids.astype(int)].tolist()) <= {top}

    def test_probes_recorded(self):
        used = []
        pnns_query(self.ix, self.qs[0], 5, 3, 1.0, probes_out=used)
        assert used == [probe_list(self.ix, self.qs[0], 3, 1.0)] and len(used[0]) == 3

    def test_parallel_matches_serial(self):
        for q in self.qs[:5]:
            np.testing.assert_array_equal(pnns_query(self.ix, q, 10, 4, 1.0, parallel=True).ids,
                                          pnns_query(self.ix, q, 10, 4, 1.0).ids)

    def test_roundtrip(self, tmp_path):
        save_partitioned(self.ix, tmp_path / "ix")
        back = load_partitioned(tmp_path / "ix")
        assert back.cluster_sizes() == self.ix.cluster_sizes()
        for q in self.qs[:5]:
            a, b = pnns_query(back, q, 10, 2, 0.99), pnns_query(self.ix, q, 10, 2, 0.99)
            np.testing.assert_array_equal(a.ids, b.ids)
            np.testing.assert_array_equal(a.scores, b.scores)


def test_two_probes_beat_one_on_blobs():
    pv = planted_vectors(4000, 200, dim=16, blocks=8, clusters_per_block=1, seed=1)
    vs = VectorSet(np.arange(len(pv.docs), dtype=np.uint64), pv.docs)
    router, _ = train_router(pv.docs, pv.doc_cluster, 8, epochs=10, lr=1e-2)
    ix = build_partitioned(vs, pv.doc_cluster, 8, router)

    def mean_recall(d):
        return np.mean([recall_at_k(pnns_query(ix, q, 100, d, 0.99).ids, brute_force_search(vs, q, 100).ids)
                        for q in pv.queries])
    assert mean_recall(2) >= mean_recall(1)


class TestRecall:
    def test_identical(self):
        assert recall_at_k([1, 2, 3], [3, 2, 1]) == 1.0

    def test_ninety_of_hundred(self):
        assert recall_at_k(list(range(90)) + list(range(500, 510)), list(range(100))) == 0.9

    def test_disjoint(self):
        assert recall_at_k([4, 5], [1, 2]) == 0.0

    def test_empty_exact(self):
        with pytest.raises(DataError):
            recall_at_k([1], [])
