import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dyadsearch.errors import DataError
from dyadsearch.graph import InteractionRecord, build_graph, cluster_affinity
from dyadsearch.negatives import (GraphNegativeSampler, RandomNegativeSampler, SamplerConfig, dump_negatives,
                                  sample_negatives, top_affinity_clusters)
from dyadsearch.partition import Partitioning

from conftest import biclique_records


def block_partition(g):
    """Cluster = block number encoded in ids like ``q3_1`` / ``d3_0``."""
    a = [int(x[1:].split("_")[0]) for x in g.query_ids] + [int(x[1:].split("_")[0]) for x in g.doc_ids]
    return Partitioning(np.array(a), max(a) + 1)


def blocks_graph(blocks=4, q_per=3, d_per=5, cross=()):
    return build_graph(biclique_records(blocks, q_per, d_per, cross))


class TestTopAffinity:
    def test_sorted_row(self):
        A = np.array([[0, 5, 2, 9], [5, 0, 0, 0], [2, 0, 0, 0], [9, 0, 0, 0]])
        assert top_affinity_clusters(A, 0, 2) == [3, 1]

    def test_two_clusters(self):
        assert top_affinity_clusters(np.array([[4, 0], [0, 7]]), 0, 1) == [1]

    def test_ties_lower_id(self):
        A = np.array([[0, 3, 3, 3], [3, 0, 0, 0], [3, 0, 0, 0], [3, 0, 0, 0]])
        assert top_affinity_clusters(A, 0, 2) == [1, 2]

    def test_window_larger_than_r(self):
        A = np.zeros((3, 3), dtype=int)
        assert top_affinity_clusters(A, 1, 10) == [0, 2]

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000), w=st.integers(1, 5), c=st.integers(0, 5))
    def test_matches_full_sort(self, seed, w, c):
        rng = np.random.default_rng(seed)
        M = rng.integers(0, 4, size=(6, 6))
        A = M + M.T
        ranked = sorted((j for j in range(6) if j != c), key=lambda j: (-A[c, j], j))
        assert top_affinity_clusters(A, c, w) == ranked[:w]


class TestGraphSampler:
    def test_two_clusters_always_other(self):
        g = blocks_graph(2, cross=[(0, 1)])
        p = block_partition(g)
        s = GraphNegativeSampler(g, p, cluster_affinity(g, p), SamplerConfig(window=1, budget=64))
        qs = [i for i, q in enumerate(g.query_ids) if q.startswith("q0_")]
        pairs = s.sample(qs, np.random.default_rng(0))
        dc = p.doc_clusters(g.n_queries)
        assert pairs and all(dc[d] == 1 for _, d in pairs)

    def test_ceil_count_per_query(self):
        g = blocks_graph(3, cross=[(0, 1), (1, 2)])
        p = block_partition(g)
        s = GraphNegativeSampler(g, p, cluster_affinity(g, p), SamplerConfig(window=2, budget=6))
        pairs = s.sample([0, 1, 2], np.random.default_rng(1))
        assert len(pairs) == 6
        assert [q for q, _ in pairs].count(0) == 2

    def test_ceil_rounds_up(self):
        g = blocks_graph(3, cross=[(0, 1)])
        p = block_partition(g)
        s = GraphNegativeSampler(g, p, cluster_affinity(g, p), SamplerConfig(window=2, budget=7))
        pairs = s.sample([0, 1, 2], np.random.default_rng(1))
        assert len(pairs) == 9

    def test_window_frequencies_uniform(self):
        g = blocks_graph(4)
        p = block_partition(g)
        s = GraphNegativeSampler(g, p, cluster_affinity(g, p), SamplerConfig(window=3, budget=1))
        choices = []
        rng = np.random.default_rng(2)
        for _ in range(30_000):
            s.sample([0], rng, choices_out=choices)
        freq = np.bincount(choices, minlength=4)[1:] / len(choices)
        assert np.all((freq >= 0.30) & (freq <= 0.37))

    def test_positives_never_returned(self):
        # query q0_0 buys every doc of block 1 as well, so block 1 is its top window
        recs = biclique_records(3, 2, 4) + [InteractionRecord("q0_0", f"d1_{j}", 1) for j in range(3)]
        g = build_graph(recs)
        p = block_partition(g)
        s = GraphNegativeSampler(g, p, cluster_affinity(g, p), SamplerConfig(window=1, budget=200))
        q = g.query_index()["q0_0"]
        pos = set(g.docs_of_query(q).tolist())
        pairs = s.sample([q], np.random.default_rng(3))
        assert len(pairs) == 200
        assert not pos.intersection(d for _, d in pairs)
        assert {g.doc_ids[d] for _, d in pairs} == {"d1_3"}

    def test_skips_cluster_with_only_positives(self):
        recs = biclique_records(3, 2, 2) + [InteractionRecord("q0_0", f"d1_{j}", 5) for j in range(2)]
        g = build_graph(recs)
        p = block_partition(g)
        s = GraphNegativeSampler(g, p, cluster_affinity(g, p), SamplerConfig(window=2, budget=10))
        q = g.query_index()["q0_0"]
        dc = p.doc_clusters(g.n_queries)
        assert all(dc[d] == 2 for _, d in s.sample([q], np.random.default_rng(0)))

    def test_exhausted_window_raises(self):
        recs = biclique_records(2, 1, 1) + [InteractionRecord("q0_0", "d1_0", 1)]
        g = build_graph(recs)
        p = block_partition(g)
        s = GraphNegativeSampler(g, p, cluster_affinity(g, p), SamplerConfig(window=1, budget=4))
        with pytest.raises(DataError):
            s.sample([g.query_index()["q0_0"]], np.random.default_rng(0))

    def test_single_cluster_falls_back(self):
        g = blocks_graph(2)
        p = Partitioning(np.zeros(g.n_vertices), 1)
        s = GraphNegativeSampler(g, p, cluster_affinity(g, p), SamplerConfig(window=3, budget=8))
        pairs = s.sample([0], np.random.default_rng(0))
        assert len(pairs) == 8
        assert not set(g.docs_of_query(0).tolist()).intersection(d for _, d in pairs)

    def test_mix_random_keeps_count(self):
        g = blocks_graph(4, cross=[(0, 1)])
        p = block_partition(g)
        s = GraphNegativeSampler(g, p, cluster_affinity(g, p), SamplerConfig(window=1, budget=40, mix_random=0.5))
        pairs = s.sample([0, 1], np.random.default_rng(0))
        assert len(pairs) == 40

    def test_deterministic_under_seed(self):
        g = blocks_graph(4, cross=[(0, 1), (2, 3)])
        p = block_partition(g)
        A = cluster_affinity(g, p)
        cfg = SamplerConfig(window=2, budget=30, seed=11)
        assert sample_negatives(g, p, A, [0, 3, 5], cfg) == sample_negatives(g, p, A, [0, 3, 5], cfg)

    def test_empty_queries(self):
        g = blocks_graph(2)
        p = block_partition(g)
        s = GraphNegativeSampler(g, p, cluster_affinity(g, p), SamplerConfig())
        assert s.sample([], np.random.default_rng(0)) == []

    def test_config_validation(self):
        with pytest.raises(DataError):
            SamplerConfig(window=0)
        with pytest.raises(DataError):
            SamplerConfig(budget=0)
        with pytest.raises(DataError):
            SamplerConfig(mix_random=1.5)


class TestRandomSampler:
    def test_count_and_no_positives(self):
        g = blocks_graph(3)
        s = RandomNegativeSampler(g, 10)
        pairs = s.sample([0, 4], np.random.default_rng(0))
        assert len(pairs) == 10
        pos = g.positive_pairs()
        assert not pos.intersection(pairs)


def test_dump_format(tmp_path):
    g = blocks_graph(2)
    dump_negatives(tmp_path / "n.tsv", g, [(0, 3)])
    assert (tmp_path / "n.tsv").read_text() == f"{g.query_ids[0]}\t{g.doc_ids[3]}\t0\n"
