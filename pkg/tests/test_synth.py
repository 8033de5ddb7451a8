import numpy as np
import pytest

from dyadsearch.errors import DataError
from dyadsearch.graph import build_graph, load_interactions
from dyadsearch.partition import edge_cut, partition
from dyadsearch.synth import SynthConfig, generate, planted_vectors, read_tokens, write_synth

from scipy.sparse.csgraph import connected_components


class TestGenerate:
    def test_disconnected_blocks(self):
        data = generate(SynthConfig(topics=4, queries_per_topic=20, docs_per_topic=20, p_in=0.3, p_out=0.0, seed=1))
        g = build_graph(data.records)
        n, _ = connected_components(g.unified_adjacency(), directed=False)
        assert n == 4
        assert edge_cut(g, partition(g, 4)) == 0

    def test_single_topic(self):
        data = generate(SynthConfig(topics=1, p_out=0.0, seed=2))
        assert set(data.query_topic.tolist()) == {0}

    def test_cross_fraction_within_three_sigma(self):
        cfg = SynthConfig(topics=8, queries_per_topic=50, docs_per_topic=50, p_in=0.3, p_out=0.01, seed=3)
        data = generate(cfg)
        qt = dict(zip(data.query_ids, data.query_topic))
        dt = dict(zip(data.doc_ids, data.doc_topic))
        cross = sum(qt[r.query_id] != dt[r.doc_id] for r in data.records)
        n = len(data.records)
        f = 0.01 * 7 / (0.3 + 0.01 * 7)
        assert abs(cross / n - f) <= 3 * np.sqrt(f * (1 - f) / n)

    def test_block_density_ratio(self):
        cfg = SynthConfig(topics=6, queries_per_topic=40, docs_per_topic=40, p_in=0.2, p_out=0.01, seed=4)
        data = generate(cfg)
        qt = dict(zip(data.query_ids, data.query_topic))
        dt = dict(zip(data.doc_ids, data.doc_topic))
        intra = sum(qt[r.query_id] == dt[r.doc_id] for r in data.records)
        inter = len(data.records) - intra
        pairs_in = 6 * 40 * 40
        pairs_out = 6 * 5 * 40 * 40
        assert (intra / pairs_in) >= (inter / pairs_out) * 0.2 / (2 * 0.01)

    def test_deterministic(self):
        cfg = SynthConfig(seed=5, heldout_fraction=0.2)
        a, b = generate(cfg), generate(cfg)
        assert a.records == b.records and a.query_tokens == b.query_tokens

    def test_weights_at_least_one(self):
        data = generate(SynthConfig(seed=6))
        w = np.array([r.weight for r in data.records])
        assert w.min() >= 1 and w.max() > 1

    def test_heldout_split(self):
        data = generate(SynthConfig(heldout_fraction=0.2, seed=7))
        held = set(data.heldout_queries())
        assert held and not held.intersection(r.query_id for r in data.records)

    def test_token_counts(self):
        data = generate(SynthConfig(seed=8))
        assert all(len(t) == 3 for t in data.query_tokens.values())
        assert all(len(t) == 8 for t in data.doc_tokens.values())

    @pytest.mark.parametrize("kw", [dict(topics=0), dict(p_in=0.1, p_out=0.2), dict(family_size=3),
                                    dict(heldout_fraction=1.0), dict(p_family=1.5)])
    def test_invalid(self, kw):
        with pytest.raises(DataError):
            generate(SynthConfig(**kw))

    def test_zero_edges(self):
        with pytest.raises(DataError):
            generate(SynthConfig(topics=1, queries_per_topic=1, docs_per_topic=1, p_in=1e-12, p_out=0.0))


def test_write_files(tmp_path):
    data = generate(SynthConfig(topics=2, queries_per_topic=5, docs_per_topic=5, p_in=0.5, seed=9))
    paths = write_synth(data, tmp_path)
    assert load_interactions(paths["interactions"]) == data.records
    qt, dtok = read_tokens(paths["tokens"])
    assert qt == data.query_tokens and dtok == data.doc_tokens
    labels = dict(line.split("\t") for line in paths["labels"].read_text().splitlines())
    assert labels["q:q000000"] == "0" and labels[f"d:{data.doc_ids[-1]}"] == "1"


def test_planted_vectors_shape():
    pv = planted_vectors(1000, 50, dim=16, blocks=4, clusters_per_block=2, seed=0)
    assert pv.docs.shape == (1000, 16) and pv.docs.dtype == np.float32
    np.testing.assert_allclose(np.linalg.norm(pv.docs, axis=1), 1.0, rtol=1e-5)
    assert pv.doc_cluster.max() < 8 and len(pv.query_cluster) == 50
