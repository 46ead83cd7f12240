"""Build a random-projection forest and trade search effort for recall.

Run: python demos/03_ann_index.py
"""
import time

from coderag.index import AnnConfig, VectorStore, ann_search, build_forest, exact_search, random_unit_vectors, recall_at_k

n, d, k = 10_000, 128, 10
store = VectorStore([f"v{i:05d}" for i in range(n)], random_unit_vectors(n, d, seed=0))
queries = random_unit_vectors(100, d, seed=1)
exact = [[i for i, _ in exact_search(store, q, k)] for q in queries]

start = time.perf_counter()
forest = build_forest(store, AnnConfig(n_trees=50), seed=0)
print(f"built {len(forest.trees)} trees over {n} vectors in {time.perf_counter() - start:.1f}s")

# search_k bounds how many candidates are re-ranked exactly
print("\nsearch_k  recall@10  ms/query")
for search_k in (200, 1000, 2000, 5000, 10_000):
    start = time.perf_counter()
    approx = [[i for i, _ in ann_search(forest, store, q, k, search_k)] for q in queries]
    ms = (time.perf_counter() - start) * 1000 / len(queries)
    print(f"{search_k:>8}  {recall_at_k(approx, exact, k):>9.3f}  {ms:>8.2f}")

# uniformly random vectors are the hard case: their nearest neighbours are
# barely closer than everything else, so recall needs a large search_k
