"""Query-time retrieval policies over a function database.

Top-k dense search, median-threshold gating, Maximal Marginal Relevance
reranking, random control retrieval, removal of target-identical results,
and a BM25 lexical baseline.
"""
from __future__ import annotations

import math
import statistics
from collections import Counter, defaultdict
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from coderag.corpus import FunctionRecord
from coderag.index import RpForest, VectorStore, ann_search, exact_search
from coderag.tokenize import filter_tokens

MODES = ("none", "single", "threshold", "full", "mmr", "random", "bm25")


@dataclass(frozen=True)
class SearchResult:
    doc_id: str
    relevance: float
    rank: int


def rerank(results: Iterable[SearchResult]) -> list[SearchResult]:
    """Renumber ranks 1..m in the given order."""
    return [replace(r, rank=i) for i, r in enumerate(results, start=1)]


def cosine_from_distance(dist: float) -> float:
    return 1.0 - dist * dist / 2.0


def dense_search(store: VectorStore, q: np.ndarray, k: int, forest: RpForest | None = None,
                 search_k: int | None = None) -> list[SearchResult]:
    """Top-k by cosine (exact scan, or the forest when given); relevance is q . d."""
    k = min(k, len(store))
    if forest is None:
        hits = exact_search(store, q, k)
    else:
        hits = ann_search(forest, store, q, k, max(search_k or k, k))
    rel = store.dots(q, np.asarray([store.position(i) for i, _ in hits], dtype=np.int64))
    return rerank(SearchResult(i, float(r), 0) for (i, _), r in zip(hits, rel))


# -- MMR -----------------------------------------------------------------------

@dataclass(frozen=True)
class MmrConfig:
    lam: float = 0.5
    m: int = 10
    candidate_pool: int = 100
    additive: bool = False   # literal "+" redundancy term, for replication only

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.m > self.candidate_pool:
            raise ValueError("m must not exceed candidate_pool")


def mmr_select(ids: Sequence[str], relevance: Sequence[float], similarity: np.ndarray,
               lam: float, m: int, additive: bool = False) -> list[str]:
    """Greedy MMR given relevance scores and a pairwise similarity matrix.

    Picks argmax of lam * rel - (1 - lam) * max similarity to the picks so far
    (ties: smallest id).
    """
    n = len(ids)
    if n == 0:
        return []
    rel = np.asarray(relevance, dtype=np.float64)
    sim = np.asarray(similarity, dtype=np.float64)
    sign = 1.0 if additive else -1.0
    redundancy = np.full(n, -np.inf)
    remaining = list(range(n))
    picked: list[int] = []
    while remaining and len(picked) < m:
        if picked:
            scores = lam * rel + sign * (1.0 - lam) * redundancy
        else:
            scores = rel
        best = min(remaining, key=lambda j: (-scores[j], ids[j]))
        picked.append(best)
        remaining.remove(best)
        redundancy = np.maximum(redundancy, sim[best])
    return [ids[j] for j in picked]


def mmr_rerank(q, candidates: Sequence[tuple[str, np.ndarray]], cfg: MmrConfig) -> list[str]:
    """MMR over (id, unit vector) candidates; cosine for relevance and redundancy."""
    if not candidates:
        return []
    ids = [c[0] for c in candidates]
    V = np.stack([np.asarray(c[1], dtype=np.float64) for c in candidates])
    rel = (V * np.asarray(q, dtype=np.float64)).sum(axis=1)
    return mmr_select(ids, rel, V @ V.T, cfg.lam, cfg.m, cfg.additive)


def mmr_search(store: VectorStore, q, cfg: MmrConfig, forest: RpForest | None = None,
               search_k: int | None = None) -> list[SearchResult]:
    pool = dense_search(store, q, cfg.candidate_pool, forest, search_k)
    rel = {r.doc_id: r.relevance for r in pool}
    chosen = mmr_rerank(q, [(r.doc_id, store.vector(r.doc_id)) for r in pool], cfg)
    return rerank(SearchResult(i, rel[i], 0) for i in chosen)


# -- gating / control ------------------------------------------------------------

def compute_threshold(scores: Sequence[float]) -> float:
    """Median of top-1 scores (mean of the middle pair for even counts)."""
    if not scores:
        raise ValueError("cannot take the median of no scores")
    return float(statistics.median(scores))


def threshold_retrieve(top1: SearchResult | None, theta: float) -> list[SearchResult]:
    if top1 is None or not top1.relevance > theta:
        return []
    return [replace(top1, rank=1)]


def random_retrieve(db_ids: Iterable[str], count: int, seed: int) -> list[str]:
    pool = sorted(db_ids)
    if count > len(pool):
        raise ValueError(f"cannot draw {count} documents from {len(pool)}")
    if count == 0:
        return []
    rng = np.random.default_rng(seed)
    return [pool[int(i)] for i in rng.choice(len(pool), size=count, replace=False)]


def dedupe_target(results: Sequence[SearchResult], target: FunctionRecord,
                  docs: Mapping[str, FunctionRecord]) -> list[SearchResult]:
    """Drop results whose filter-mode token sequence equals the target's."""
    key = filter_tokens(target.full_text())
    kept = [r for r in results if filter_tokens(docs[r.doc_id].full_text()) != key]
    return rerank(kept)


# -- BM25 ------------------------------------------------------------------------

class Bm25Index:
    """Okapi BM25 over filter-mode token sequences."""

    def __init__(self, docs: Mapping[str, Sequence[str]], k1: float = 1.2, b: float = 0.75):
        self.k1 = k1
        self.b = b
        self.postings: dict[str, list[tuple[str, int]]] = defaultdict(list)
        self.doc_lengths: dict[str, int] = {}
        for doc_id in sorted(docs):
            toks = list(docs[doc_id])
            self.doc_lengths[doc_id] = len(toks)
            for term, tf in sorted(Counter(toks).items()):
                self.postings[term].append((doc_id, tf))
        self.n_docs = len(self.doc_lengths)
        self.avg_doc_length = (sum(self.doc_lengths.values()) / self.n_docs) if self.n_docs else 0.0

    @classmethod
    def from_records(cls, records: Iterable[FunctionRecord], text: Callable[[FunctionRecord], str] | None = None,
                     **kw) -> "Bm25Index":
        """Index each record's ``text(record)``, by default signature, docstring and body."""
        text = text or FunctionRecord.full_text
        return cls({r.id: filter_tokens(text(r)) for r in records}, **kw)

    def idf(self, term: str) -> float:
        n_t = len(self.postings.get(term, ()))
        return math.log((self.n_docs - n_t + 0.5) / (n_t + 0.5) + 1.0)

    def scores(self, query_tokens: Sequence[str]) -> dict[str, float]:
        out: dict[str, float] = defaultdict(float)
        for term in query_tokens:
            postings = self.postings.get(term)
            if not postings:
                continue
            idf = self.idf(term)
            for doc_id, tf in postings:
                norm = 1 - self.b + self.b * self.doc_lengths[doc_id] / self.avg_doc_length
                out[doc_id] += idf * tf * (self.k1 + 1) / (tf + self.k1 * norm)
        return out


def bm25_search(index: Bm25Index, query_tokens: Sequence[str], k: int) -> list[SearchResult]:
    if not query_tokens:
        return []
    scored = index.scores(query_tokens)
    top = sorted(scored.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
    return rerank(SearchResult(d, s, 0) for d, s in top)
