"""Compare the retrieval modes on one query: top-k, MMR, threshold, random and BM25.

Run: python demos/04_retrieval_modes.py
"""
import tempfile
from pathlib import Path

import numpy as np

from coderag.corpus import load_split
from coderag.featurize import embed_code, embed_queries, unit_rows
from coderag.index import load_index
from coderag.pipeline import PipelineConfig, load_model, run_pipeline
from coderag.retrieve import (
    Bm25Index, MmrConfig, bm25_search, compute_threshold, dense_search, mmr_search, random_retrieve,
    threshold_retrieve,
)
from coderag.tokenize import tokenize_code

out = Path(tempfile.mkdtemp()) / "run"
run_pipeline(PipelineConfig(out=str(out)))
pair, feats = load_model(out / "model" / "params.fenc")
forest, store = load_index(out / "index" / "db.idx")
split = load_split(out / "corpus")
docs = {r.id: r for r in split.train}

query = split.test[0]
print("query docstring:", query.docstring)
q, _ = unit_rows(embed_queries(pair, feats, [query.docstring]))
q = q[0]


def show(title, ids):
    print(f"\n{title}")
    for i in ids:
        print(f"  {i}  {docs[i].name}")


show("top-5 by cosine", [r.doc_id for r in dense_search(store, q, 5, forest, 1000)])

# MMR trades relevance for novelty: each pick is penalised by its closest earlier pick
picked = mmr_search(store, q, MmrConfig(lam=0.5, m=5, candidate_pool=50), forest, 1000)
show("MMR, lambda=0.5", [r.doc_id for r in picked])

# threshold mode keeps the top hit only when it beats the median top-1 score of training queries
train_q, _ = unit_rows(embed_queries(pair, feats, [r.docstring for r in split.train[:200]]))
theta = compute_threshold([float(np.max(store.dots(v))) for v in train_q])
top1 = dense_search(store, q, 1, forest, 1000)[0]
print(f"\nthreshold {theta:.3f}; top-1 relevance {top1.relevance:.3f} ->",
      [r.doc_id for r in threshold_retrieve(top1, theta)] or "nothing retrieved")

show("random control", random_retrieve(store.ids, 3, seed=0))

bm25 = Bm25Index({r.id: tokenize_code(r.signature + "\n" + r.body) for r in split.train})
show("BM25 over code subtokens", [r.doc_id for r in bm25_search(bm25, tokenize_code(query.docstring), 5)])
