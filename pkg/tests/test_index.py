import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coderag.errors import DataError
from coderag.index import (
    AnnConfig, VectorStore, angular_distance, ann_search, build_forest, candidates, exact_search,
    export_embeddings, import_embeddings, load_index, random_unit_vectors, save_index,
)
from coderag.metrics import ann_recall


def make_store(n=500, d=16, seed=0):
    return VectorStore([f"v{i:05d}" for i in range(n)], random_unit_vectors(n, d, seed))


def brute_force(store, q, k):
    """Independent oracle: full argsort over float64 cosines."""
    V = store.vectors.astype(np.float64)
    dist = np.sqrt(np.maximum(0.0, 2.0 - 2.0 * (V * q).sum(axis=1)))
    order = sorted(range(len(store)), key=lambda j: (dist[j], store.ids[j]))
    return [store.ids[j] for j in order[:k]]


@pytest.fixture(scope="module")
def store():
    return make_store()


@pytest.fixture(scope="module")
def forest(store):
    return build_forest(store, AnnConfig(n_trees=10, leaf_size=16), seed=3)


class TestAngularDistance:
    @pytest.mark.parametrize("u, v, expected", [
        ([1, 0], [1, 0], 0.0),
        ([1, 0], [0, 1], math.sqrt(2)),
        ([1, 0], [-1, 0], 2.0),
    ])
    def test_examples(self, u, v, expected):
        assert angular_distance(u, v) == pytest.approx(expected, abs=1e-12)

    def test_rejects_non_unit(self):
        with pytest.raises(ValueError):
            angular_distance([1.0, 1.0], [1.0, 0.0])


class TestVectorStore:
    def test_normalizes(self):
        s = VectorStore(["a"], np.array([[3.0, 4.0]]))
        assert np.allclose(s.vectors[0], [0.6, 0.8])

    @pytest.mark.parametrize("ids, vecs", [
        (["a", "a"], [[1.0, 0.0], [0.0, 1.0]]),
        (["a"], [[0.0, 0.0]]),
        (["a", "b"], [[1.0, 0.0]]),
    ])
    def test_rejects(self, ids, vecs):
        with pytest.raises(DataError):
            VectorStore(ids, np.array(vecs))


class TestExactSearch:
    def test_self_first(self, store):
        hits = exact_search(store, store.vectors[7].astype(np.float64), 3)
        assert hits[0] == (store.ids[7], pytest.approx(0.0, abs=1e-3))

    def test_full_ranking_sorted(self, store):
        hits = exact_search(store, store.vectors[0].astype(np.float64), len(store))
        dists = [d for _, d in hits]
        assert len(hits) == len(store) and dists == sorted(dists)

    def test_k_above_n_returns_all(self):
        s = make_store(5)
        assert len(exact_search(s, s.vectors[0].astype(np.float64), 50)) == 5

    def test_duplicates_ordered_by_id(self):
        q = np.array([1.0, 0.0])
        s = VectorStore(["z", "b", "a", "m"], np.array([[0.0, 1.0], q, q, [0.6, 0.8]]))
        assert [i for i, _ in exact_search(s, q, 4)] == ["a", "b", "m", "z"]

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force_oracle(self, store, seed):
        q = random_unit_vectors(1, store.d, 100 + seed)[0]
        assert [i for i, _ in exact_search(store, q, 25)] == brute_force(store, q, 25)


class TestForest:
    def test_small_store_is_one_leaf(self):
        s = make_store(10)
        f = build_forest(s, AnnConfig(n_trees=3, leaf_size=16))
        for tree in f.trees:
            assert tree.n_nodes == 1 and tree.leaves[0].tolist() == list(range(10))

    def test_identical_vectors_unsplittable(self):
        s = VectorStore([f"x{i}" for i in range(40)], np.tile([[0.0, 1.0]], (40, 1)))
        f = build_forest(s, AnnConfig(n_trees=2, leaf_size=4))
        assert all(t.n_nodes == 1 for t in f.trees)

    def test_partition_and_leaf_bound(self, store, forest):
        for tree in forest.trees:
            members = np.concatenate(list(tree.leaves.values()))
            assert sorted(members.tolist()) == list(range(len(store)))
            assert max(len(m) for m in tree.leaves.values()) <= forest.leaf_size

    def test_routing_reaches_own_leaf(self, store, forest):
        for tree in forest.trees[:3]:
            for row in range(0, len(store), 17):
                leaf = tree.route(store.vectors[row].astype(np.float64))
                assert row in tree.leaves[leaf]

    def test_seeded(self, store):
        a = build_forest(store, AnnConfig(n_trees=2, leaf_size=16), seed=9)
        b = build_forest(store, AnnConfig(n_trees=2, leaf_size=16), seed=9)
        for ta, tb in zip(a.trees, b.trees):
            assert np.array_equal(ta.normals, tb.normals) and np.array_equal(ta.children, tb.children)


class TestAnnSearch:
    def test_exhaustive_search_k_matches_exact(self, store, forest):
        for seed in range(10):
            q = random_unit_vectors(1, store.d, 200 + seed)[0]
            assert ann_search(forest, store, q, 10, len(store)) == exact_search(store, q, 10)

    @pytest.mark.parametrize("row", [0, 123, 499])
    def test_stored_point_ranked_first(self, store, forest, row):
        q = store.vectors[row].astype(np.float64)
        assert ann_search(forest, store, q / np.linalg.norm(q), 1, 1)[0][0] == store.ids[row]

    def test_search_k_below_k(self, store, forest):
        with pytest.raises(ValueError):
            ann_search(forest, store, store.vectors[0].astype(np.float64), 10, 5)

    def test_results_sorted_and_consistent_with_exact(self, store, forest):
        q = random_unit_vectors(1, store.d, 77)[0]
        hits = ann_search(forest, store, q, 20, 60)
        dists = [d for _, d in hits]
        assert dists == sorted(dists)
        exact = dict(exact_search(store, q, len(store)))
        assert all(exact[i] == d for i, d in hits)

    def test_candidates_are_stored_rows(self, store, forest):
        rows = candidates(forest, random_unit_vectors(1, store.d, 5)[0], 100)
        assert len(rows) >= 100 and len(set(rows.tolist())) == len(rows)
        assert rows.min() >= 0 and rows.max() < len(store)

    def test_recall_non_decreasing_in_search_k(self, store, forest):
        queries = random_unit_vectors(100, store.d, 31)
        exact = [brute_force(store, q, 10) for q in queries]
        recalls = []
        for search_k in (10, 20, 40, 80, 160, 320, 500):
            approx = [[i for i, _ in ann_search(forest, store, q, 10, search_k)] for q in queries]
            recalls.append(ann_recall(approx, exact, 10))
        assert recalls == sorted(recalls)
        assert recalls[-1] == 1.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 15), st.integers(15, 200))
    def test_output_is_subset_of_store(self, store, forest, seed, k, search_k):
        q = random_unit_vectors(1, store.d, seed)[0]
        hits = ann_search(forest, store, q, k, search_k)
        assert len(hits) == k and all(i in store._pos for i, _ in hits)


class TestFiles:
    def test_embedding_round_trip_bit_exact(self, store, tmp_path):
        export_embeddings(store, tmp_path / "e.emb")
        assert (tmp_path / "e.emb").read_text().startswith(f"emb v1 {len(store)} {store.d}\n")
        loaded = import_embeddings(tmp_path / "e.emb")
        assert loaded.ids == store.ids
        assert loaded.vectors.tobytes() == store.vectors.tobytes()

    def test_zero_vector_record(self, tmp_path):
        path = tmp_path / "z.emb"
        path.write_text("emb v1 1 2\nbad\tAAAAAAAAAAA=\n")
        with pytest.raises(DataError, match="bad"):
            import_embeddings(path)

    def test_dimension_mismatch(self, tmp_path):
        s = VectorStore(["a"], np.array([[1.0, 0.0, 0.0]]))
        export_embeddings(s, tmp_path / "e.emb")
        text = (tmp_path / "e.emb").read_text().replace("emb v1 1 3", "emb v1 1 2")
        (tmp_path / "e.emb").write_text(text)
        with pytest.raises(DataError, match="'a'"):
            import_embeddings(tmp_path / "e.emb")

    def test_index_round_trip_is_byte_stable(self, store, forest, tmp_path):
        save_index(forest, store, tmp_path / "a.idx")
        save_index(forest, store, tmp_path / "b.idx")
        assert (tmp_path / "a.idx").read_bytes() == (tmp_path / "b.idx").read_bytes()
        f2, s2 = load_index(tmp_path / "a.idx")
        assert s2.ids == store.ids
        q = random_unit_vectors(1, store.d, 8)[0]
        assert ann_search(f2, s2, q, 10, 50) == ann_search(forest, store, q, 10, 50)
