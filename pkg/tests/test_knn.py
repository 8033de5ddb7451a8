import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dyadsearch.errors import DataError
from dyadsearch.knn import (ExactIndex, IVFParams, VectorSet, brute_force_search, ivf_build, ivf_search, kmeans,
                            load_ivf, merge_hits, normalize_rows, read_vectors, save_ivf, top_k, write_vectors)


def unit_set(rng, m, dim, offset=0):
    return VectorSet(np.arange(offset, offset + m, dtype=np.uint64), normalize_rows(rng.standard_normal((m, dim))))


def blob_set(rng, per=200, dim=8, spread=0.02):
    centres = normalize_rows(np.eye(dim)[:4] + 0.0)
    lab = np.repeat(np.arange(4), per)
    x = normalize_rows(centres[lab] + rng.standard_normal((len(lab), dim)) * spread)
    return VectorSet(np.arange(len(lab), dtype=np.uint64), x), lab, centres


class TestBruteForce:
    def test_basis(self):
        vs = VectorSet(np.array([10, 20]), np.eye(2))
        h = brute_force_search(vs, np.array([1.0, 0.0]), 1)
        assert h.ids.tolist() == [10]
        assert h.scores.tolist() == [1.0]

    def test_k_exceeds_corpus(self):
        rng = np.random.default_rng(0)
        vs = unit_set(rng, 5, 3)
        h = brute_force_search(vs, vs.vectors[0], 50)
        assert len(h) == 5
        assert np.all(np.diff(h.scores) <= 0)

    def test_matches_python_scan(self):
        rng = np.random.default_rng(1)
        vs = unit_set(rng, 50, 8)
        q = normalize_rows(rng.standard_normal(8))
        scored = []
        for i, v in zip(vs.ids.tolist(), vs.vectors):
            scored.append((-sum(float(a) * float(b) for a, b in zip(v, q)), i))
        expect = [i for _, i in sorted(scored)[:10]]
        assert brute_force_search(vs, q, 10).ids.tolist() == expect

    def test_ties_lower_id(self):
        vs = VectorSet(np.array([9, 3, 7]), np.ones((3, 2)) / np.sqrt(2))
        assert brute_force_search(vs, vs.vectors[0], 2).ids.tolist() == [3, 7]

    def test_dim_mismatch(self):
        vs = VectorSet(np.array([0]), np.ones((1, 3)))
        with pytest.raises(DataError):
            brute_force_search(vs, np.ones(2), 1)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), k=st.integers(1, 40))
    def test_merge_of_shards_equals_global(self, seed, k):
        rng = np.random.default_rng(seed)
        vs = unit_set(rng, 60, 5)
        q = vs.vectors[0]
        cut = rng.integers(1, 59)
        parts = [brute_force_search(vs.subset(np.arange(cut)), q, k),
                 brute_force_search(vs.subset(np.arange(cut, 60)), q, k)]
        g, m = brute_force_search(vs, q, k), merge_hits(parts, k)
        np.testing.assert_array_equal(g.ids, m.ids)
        np.testing.assert_array_equal(g.scores, m.scores)


class TestTopK:
    def test_keeps_tied_boundary(self):
        h = top_k(np.array([5, 1, 3, 2], dtype=np.uint64), np.array([0.5, 0.9, 0.5, 0.5], dtype=np.float32), 2)
        assert h.ids.tolist() == [1, 2]


class TestVectorSet:
    def test_rejects_nan(self):
        with pytest.raises(DataError):
            VectorSet(np.array([0]), np.array([[np.nan, 1.0]]))

    def test_rejects_duplicate_ids(self):
        with pytest.raises(DataError):
            VectorSet(np.array([1, 1]), np.ones((2, 2)))

    def test_file_roundtrip(self, tmp_path):
        vs = unit_set(np.random.default_rng(2), 7, 3, offset=100)
        write_vectors(tmp_path / "v.vec", vs)
        raw = (tmp_path / "v.vec").read_bytes()
        assert raw[:4] == b"VEC1" and len(raw) == 24 + 7 * (8 + 12)
        back = read_vectors(tmp_path / "v.vec")
        np.testing.assert_array_equal(back.ids, vs.ids)
        np.testing.assert_array_equal(back.vectors, vs.vectors)

    def test_truncated_file(self, tmp_path):
        write_vectors(tmp_path / "v.vec", unit_set(np.random.default_rng(3), 3, 2))
        (tmp_path / "v.vec").write_bytes((tmp_path / "v.vec").read_bytes()[:-1])
        with pytest.raises(DataError):
            read_vectors(tmp_path / "v.vec")


class TestIVF:
    def test_single_list(self):
        vs = unit_set(np.random.default_rng(4), 30, 4)
        ix = ivf_build(vs, IVFParams(nlist=1, nprobe=1))
        assert len(ix.lists) == 1 and len(ix.lists[0]) == 30

    def test_lists_recover_blobs(self):
        vs, lab, _ = blob_set(np.random.default_rng(5))
        ix = ivf_build(vs, IVFParams(nlist=4, nprobe=1))
        groups = sorted(sorted(set(lab[l].tolist())) for l in ix.lists)
        assert groups == [[0], [1], [2], [3]]

    def test_deterministic(self):
        vs = unit_set(np.random.default_rng(6), 300, 6)
        a = ivf_build(vs, IVFParams(nlist=8, nprobe=2, seed=3))
        b = ivf_build(vs, IVFParams(nlist=8, nprobe=2, seed=3))
        for x, y in zip(a.lists, b.lists):
            np.testing.assert_array_equal(x, y)

    def test_full_probe_equals_brute_force(self):
        rng = np.random.default_rng(7)
        raw = VectorSet(np.arange(500, dtype=np.uint64), rng.standard_normal((500, 8)))
        ix = ivf_build(raw, IVFParams(nlist=10, nprobe=2))
        unit = raw.normalized()
        for q in normalize_rows(rng.standard_normal((20, 8))):
            a, b = ivf_search(ix, q, 25, 10), brute_force_search(unit, q, 25)
            np.testing.assert_array_equal(a.ids, b.ids)
            np.testing.assert_array_equal(a.scores, b.scores)

    def test_one_probe_at_blob_centre(self):
        vs, lab, centres = blob_set(np.random.default_rng(8))
        ix = ivf_build(vs, IVFParams(nlist=4, nprobe=1))
        for c in range(4):
            h = ivf_search(ix, centres[c], 50, 1)
            assert set(lab[h.ids.astype(int)].tolist()) == {c}

    def test_recall_non_decreasing_in_nprobe(self):
        rng = np.random.default_rng(9)
        vs = unit_set(rng, 2000, 8)
        ix = ivf_build(vs, IVFParams(nlist=16, nprobe=1))
        qs = normalize_rows(rng.standard_normal((30, 8)))
        exact = [set(brute_force_search(vs, q, 100).ids.tolist()) for q in qs]
        recalls = [np.mean([len(e & set(ivf_search(ix, q, 100, p).ids.tolist())) / 100 for q, e in zip(qs, exact)])
                   for p in range(1, 17)]
        assert all(b >= a for a, b in zip(recalls, recalls[1:]))
        assert recalls[-1] == 1.0

    def test_param_validation(self):
        vs = unit_set(np.random.default_rng(10), 5, 2)
        with pytest.raises(DataError):
            ivf_build(vs, IVFParams(nlist=6, nprobe=1))
        with pytest.raises(DataError):
            ivf_build(vs, IVFParams(nlist=2, nprobe=3))

    def test_save_load(self, tmp_path):
        rng = np.random.default_rng(11)
        vs = unit_set(rng, 100, 4)
        ix = ivf_build(vs, IVFParams(nlist=5, nprobe=2))
        save_ivf(ix, tmp_path / "ix")
        back = load_ivf(tmp_path / "ix", ix.vectors, 2)
        q = vs.vectors[3]
        np.testing.assert_array_equal(back.search(q, 10).ids, ix.search(q, 10).ids)


def test_kmeans_no_empty_clusters():
    x = np.vstack([np.zeros((20, 2)), np.ones((1, 2))]).astype(np.float32)
    _, assign = kmeans(x, 3, iterations=5, seed=0)
    assert len(np.unique(assign)) >= 2


def test_exact_index_normalises():
    ix = ExactIndex.build(VectorSet(np.array([0, 1]), np.array([[3.0, 4.0], [0.0, 2.0]])))
    np.testing.assert_allclose(np.linalg.norm(ix.vectors.vectors, axis=1), 1.0, rtol=1e-6)
    assert ix.memory_bytes() > 0
