import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coderag.index import VectorStore, build_forest, AnnConfig, random_unit_vectors
from coderag.retrieve import (
    Bm25Index, MmrConfig, SearchResult, bm25_search, compute_threshold, dedupe_target, dense_search,
    mmr_rerank, mmr_search, mmr_select, random_retrieve, rerank, threshold_retrieve,
)

from conftest import make_function

# BM25 (k1=1.2, b=0.75) on d1=[a,b,a], d2=[b,c], evaluated independently term by term
BM25_ORACLE = {
    ("a", "d1"): 0.902321773509988,
    ("b", "d1"): 0.16853253149021016,
    ("b", "d2"): 0.19856803215183175,
    ("c", "d2"): 0.7549127709068711,
}


@pytest.fixture(scope="module")
def store():
    return VectorStore([f"d{i:04d}" for i in range(400)], random_unit_vectors(400, 12, 5))


def mean_pairwise_cosine(store, ids):
    V = np.stack([store.vector(i).astype(np.float64) for i in ids])
    S = V @ V.T
    return (S.sum() - np.trace(S)) / (len(ids) * (len(ids) - 1))


class TestMmr:
    def test_hand_derived_example(self):
        sim = np.array([[1.0, 0.95, 0.1], [0.95, 1.0, 0.2], [0.1, 0.2, 1.0]])
        assert mmr_select(["d1", "d2", "d3"], [0.9, 0.85, 0.5], sim, 0.5, 3) == ["d1", "d3", "d2"]

    def test_additive_variant_rewards_redundancy(self):
        sim = np.array([[1.0, 0.95, 0.1], [0.95, 1.0, 0.2], [0.1, 0.2, 1.0]])
        assert mmr_select(["d1", "d2", "d3"], [0.9, 0.85, 0.5], sim, 0.5, 3, additive=True) == ["d1", "d2", "d3"]

    def test_duplicate_not_picked_second(self):
        q = np.array([0.9, np.sqrt(1 - 0.81), 0.0])
        v = np.array([1.0, 0.0, 0.0])
        w = np.array([0.0, 1.0, 0.0])
        cands = [("a", v), ("b", v.copy()), ("c", w)]
        # b scores 0.5 * 0.9 - 0.5 * 1 < 0; c scores 0.5 * 0.436 - 0 > 0
        assert mmr_rerank(q, cands, MmrConfig(lam=0.5, m=2, candidate_pool=3)) == ["a", "c"]

    def test_empty(self):
        assert mmr_rerank(np.ones(2), [], MmrConfig()) == []

    @pytest.mark.parametrize("seed", range(10))
    def test_lambda_one_is_top_m(self, store, seed):
        q = random_unit_vectors(1, store.d, seed)[0]
        top = dense_search(store, q, 10)
        got = mmr_search(store, q, MmrConfig(lam=1.0, m=10, candidate_pool=50))
        assert [r.doc_id for r in got] == [r.doc_id for r in top]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.floats(0, 1), st.integers(1, 12))
    def test_output_properties(self, store, seed, lam, m):
        q = random_unit_vectors(1, store.d, seed)[0]
        pool = dense_search(store, q, 12)
        cands = [(r.doc_id, store.vector(r.doc_id)) for r in pool]
        out = mmr_rerank(q, cands, MmrConfig(lam=lam, m=m, candidate_pool=12))
        assert len(out) == len(set(out)) == min(m, len(cands))
        assert set(out) <= {c[0] for c in cands}
        assert out[0] == pool[0].doc_id

    def test_more_diverse_than_top_m(self, store):
        mmr_div, top_div = [], []
        for q in random_unit_vectors(100, store.d, 99):
            top = [r.doc_id for r in dense_search(store, q, 10)]
            picked = [r.doc_id for r in mmr_search(store, q, MmrConfig(lam=0.5, m=10, candidate_pool=50))]
            top_div.append(mean_pairwise_cosine(store, top))
            mmr_div.append(mean_pairwise_cosine(store, picked))
        assert np.mean(mmr_div) <= np.mean(top_div)

    @pytest.mark.parametrize("kw", [{"lam": 1.5}, {"m": 20, "candidate_pool": 10}])
    def test_bad_config(self, kw):
        with pytest.raises(ValueError):
            MmrConfig(**kw)


class TestDenseSearch:
    def test_relevance_is_cosine_and_ranks_contiguous(self, store):
        q = random_unit_vectors(1, store.d, 1)[0]
        hits = dense_search(store, q, 5)
        assert [r.rank for r in hits] == [1, 2, 3, 4, 5]
        for r in hits:
            assert r.relevance == pytest.approx(float(store.vector(r.doc_id).astype(np.float64) @ q))
        rel = [r.relevance for r in hits]
        assert rel == sorted(rel, reverse=True)

    def test_forest_with_full_search_k_matches_exact(self, store):
        forest = build_forest(store, AnnConfig(n_trees=4, leaf_size=20))
        q = random_unit_vectors(1, store.d, 2)[0]
        assert dense_search(store, q, 10, forest, len(store)) == dense_search(store, q, 10)


class TestThreshold:
    @pytest.mark.parametrize("scores, expected", [([0.1, 0.3, 0.2], 0.2), ([0.1, 0.3], 0.2), ([0.4] * 5, 0.4)])
    def test_median(self, scores, expected):
        assert compute_threshold(scores) == pytest.approx(expected)

    def test_empty(self):
        with pytest.raises(ValueError):
            compute_threshold([])

    @pytest.mark.parametrize("rel, n", [(0.9, 1), (0.5, 0), (0.2, 0)])
    def test_strict_gate(self, rel, n):
        assert len(threshold_retrieve(SearchResult("d", rel, 3), 0.5)) == n

    def test_all_equal_passes_nothing(self):
        theta = compute_threshold([0.4] * 5)
        assert threshold_retrieve(SearchResult("d", 0.4, 1), theta) == []


class TestRandomRetrieve:
    def test_full_count_is_permutation(self):
        ids = sorted(f"x{i}" for i in range(20))
        assert sorted(random_retrieve(ids, 20, 0)) == ids

    def test_seeded(self):
        assert random_retrieve(range(50), 5, 3) == random_retrieve(range(50), 5, 3)

    def test_zero(self):
        assert random_retrieve(["a"], 0, 1) == []

    def test_too_many(self):
        with pytest.raises(ValueError):
            random_retrieve(["a", "b"], 3, 0)


class TestDedupe:
    def setup_method(self):
        self.target = make_function("t", body="    return x + 1")
        self.docs = {
            "t": self.target,
            "t2": make_function("t2", body="    return   x+1"),
            "o": make_function("o", body="    return x - 1"),
        }
        self.results = rerank(SearchResult(i, 1.0 - n / 10, 0) for n, i in enumerate(["t", "o", "t2"]))

    def test_removes_target_and_reformatted_copy(self):
        out = dedupe_target(self.results, self.target, self.docs)
        assert [(r.doc_id, r.rank) for r in out] == [("o", 1)]

    def test_no_identical_result(self):
        out = dedupe_target(self.results[1:2], self.target, self.docs)
        assert out == rerank(self.results[1:2])

    def test_idempotent(self):
        once = dedupe_target(self.results, self.target, self.docs)
        assert dedupe_target(once, self.target, self.docs) == once


class TestBm25:
    @pytest.fixture
    def index(self):
        return Bm25Index({"d1": ["a", "b", "a"], "d2": ["b", "c"]})

    @pytest.mark.parametrize("term, doc", sorted(BM25_ORACLE))
    def test_hand_computed_scores(self, index, term, doc):
        assert index.scores([term])[doc] == pytest.approx(BM25_ORACLE[(term, doc)], abs=1e-12)

    def test_unique_term_ranks_its_document_first(self, index):
        assert bm25_search(index, ["c"], 2)[0].doc_id == "d2"

    @pytest.mark.parametrize("query", [[], ["zzz"]])
    def test_empty_results(self, index, query):
        assert bm25_search(index, query, 5) == []

    def test_scores_additive_over_query_terms(self, index):
        s = index.scores(["a", "b"])
        assert s["d1"] == pytest.approx(BM25_ORACLE[("a", "d1")] + BM25_ORACLE[("b", "d1")])

    @settings(max_examples=50)
    @given(st.lists(st.lists(st.sampled_from("abcde"), min_size=1, max_size=8), min_size=1, max_size=6),
           st.lists(st.sampled_from("abcdefg"), min_size=1, max_size=4))
    def test_non_negative_and_zero_without_overlap(self, docs, query):
        index = Bm25Index({f"d{i}": toks for i, toks in enumerate(docs)})
        scores = index.scores(query)
        for doc_id, toks in zip(index.doc_lengths, [docs[int(k[1:])] for k in index.doc_lengths]):
            if set(toks) & set(query):
                assert scores[doc_id] > 0
            else:
                assert scores.get(doc_id, 0.0) == 0.0

    def test_ties_by_id(self):
        index = Bm25Index({"z": ["a"], "y": ["a"]})
        assert [r.doc_id for r in bm25_search(index, ["a"], 2)] == ["y", "z"]
