"""Aligning intent-snippet pairs with corpus functions by feature containment.

Features are subtoken unigrams plus ordered adjacent bigrams. The similarity
of a snippet to a function is the fraction of the snippet's feature multiset
contained in the function's.
"""
from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from coderag.corpus import FunctionRecord, IntentSnippetRecord
from coderag.featurize import code_text
from coderag.tokenize import tokenize_code

logger = logging.getLogger(__name__)

BIGRAM_JOIN = "▸"
UNREVIEWED, KEPT, DISCARDED = "unreviewed", "kept", "discarded"


def featurize(code: str) -> Counter:
    toks = tokenize_code(code)
    feats = Counter(toks)
    feats.update(a + BIGRAM_JOIN + b for a, b in zip(toks, toks[1:]))
    return feats


def aroma_similarity(query: Counter, candidate: Counter) -> float:
    """|query & candidate| / |query| with multiset (min-count) intersection."""
    size = sum(query.values())
    if size == 0:
        raise ValueError("query feature set is empty")
    overlap = sum(min(c, candidate.get(f, 0)) for f, c in query.items())
    return overlap / size


@dataclass(frozen=True)
class SofaPair:
    function_id: str
    intent_snippet_id: str
    similarity: float
    curated_verdict: str = UNREVIEWED
    curated: bool = False

    @property
    def key(self) -> tuple[str, str]:
        return self.function_id, self.intent_snippet_id


def _top(scored: Iterable[tuple[str, float]], k: int) -> list[tuple[str, float]]:
    ranked = sorted((p for p in scored if p[1] > 0), key=lambda p: (-p[1], p[0]))
    return ranked[:k]


def brute_force_neighbors(snippet: str, functions: Sequence[FunctionRecord], k: int,
                          function_feats: dict[str, Counter] | None = None) -> list[tuple[str, float]]:
    """Score every function; keep the k best with positive similarity (ties by id)."""
    q = featurize(snippet)
    if not q:
        return []
    feats = function_feats or {f.id: featurize(code_text(f)) for f in functions}
    return _top(((f.id, aroma_similarity(q, feats[f.id])) for f in functions), k)


class FeatureIndex:
    """Inverted feature index; gives exactly the brute-force scores for every function it touches."""

    def __init__(self, functions: Sequence[FunctionRecord]):
        self.ids = sorted(f.id for f in functions)
        position = {fid: i for i, fid in enumerate(self.ids)}
        lists: dict[str, tuple[list[int], list[int]]] = defaultdict(lambda: ([], []))
        for f in sorted(functions, key=lambda r: r.id):
            for feat, c in featurize(code_text(f)).items():
                rows, counts = lists[feat]
                rows.append(position[f.id])
                counts.append(c)
        self.postings = {feat: (np.asarray(r, np.int64), np.asarray(c, np.int64)) for feat, (r, c) in lists.items()}

    def neighbors(self, snippet: str, k: int) -> list[tuple[str, float]]:
        q = featurize(snippet)
        size = sum(q.values())
        if size == 0:
            return []
        overlap = np.zeros(len(self.ids), np.int64)
        for feat, qc in q.items():
            hit = self.postings.get(feat)
            if hit is not None:
                overlap[hit[0]] += np.minimum(hit[1], qc)    # rows are unique within a posting list
        nz = np.flatnonzero(overlap)
        best = nz[np.lexsort((nz, -overlap[nz]))][:k]     # ids are sorted, so row order breaks ties by id
        return [(self.ids[i], int(overlap[i]) / size) for i in best]


def build_sofa(intents: Sequence[IntentSnippetRecord], functions: Sequence[FunctionRecord],
               top_n: int = 10_000, neighbors: int = 15, curated_neighbors: int = 1) -> list[SofaPair]:
    """Mined pairs for the top_n non-curated intents, then candidates for curated intents.

    Output is ordered by (intent confidence desc, similarity desc), then
    intent id and function id. Curated intents get their ``curated_neighbors``
    best matches, marked for manual review; they are not counted in top_n.
    """
    index = FeatureIndex(functions)
    mined = sorted((r for r in intents if not r.curated), key=lambda r: (-r.confidence, r.question_id))
    rows: list[tuple[float, SofaPair]] = []
    for rec in mined[:top_n]:
        for fid, sim in index.neighbors(rec.snippet, neighbors):
            rows.append((rec.confidence, SofaPair(fid, rec.id, sim)))
    for rec in (r for r in intents if r.curated):
        for fid, sim in index.neighbors(rec.snippet, curated_neighbors):
            rows.append((rec.confidence, SofaPair(fid, rec.id, sim, UNREVIEWED, curated=True)))
    rows.sort(key=lambda t: (-t[0], -t[1].similarity, t[1].intent_snippet_id, t[1].function_id))
    return [p for _, p in rows]


@dataclass
class CurationResult:
    pairs: list[SofaPair]
    unknown: int

    def curated_subset(self) -> list[SofaPair]:
        return [p for p in self.pairs if p.curated and p.curated_verdict != DISCARDED]


def apply_curation(pairs: Sequence[SofaPair], verdicts: Iterable[tuple[str, str, str]]) -> CurationResult:
    """Record (function_id, intent_snippet_id, kept|discarded) verdicts; later lines win."""
    index = {p.key: i for i, p in enumerate(pairs)}
    out = list(pairs)
    unknown = 0
    for fid, iid, verdict in verdicts:
        if verdict not in (KEPT, DISCARDED):
            raise ValueError(f"bad verdict {verdict!r}")
        i = index.get((fid, iid))
        if i is None:
            logger.warning("verdict for unknown pair %s / %s", fid, iid)
            unknown += 1
            continue
        out[i] = replace(out[i], curated_verdict=verdict)
    return CurationResult(out, unknown)


def read_verdicts(path: str | Path) -> list[tuple[str, str, str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            fid, iid, verdict = line.split("\t")
            rows.append((fid, iid, verdict))
    return rows


def append_verdicts(path: str | Path, verdicts: Iterable[tuple[str, str, str]]) -> None:
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        for fid, iid, verdict in verdicts:
            fh.write(f"{fid}\t{iid}\t{verdict}\n")


def write_pairs(pairs: Iterable[SofaPair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"format": "sofa v1"}) + "\n")
        for p in pairs:
            fh.write(json.dumps(asdict(p), sort_keys=True) + "\n")


def read_pairs(path: str | Path) -> list[SofaPair]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            obj = json.loads(line)
            if "format" in obj:
                continue
            out.append(SofaPair(**obj))
    return out
