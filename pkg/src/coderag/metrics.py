"""Retrieval and generation metrics, plus per-mode report assembly."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

from coderag.errors import DataError


def mrr(rankings: Mapping[str, Sequence[str]], gold: Mapping[str, str]) -> float:
    """Mean reciprocal rank of each query's gold id (0 when it is not ranked)."""
    if not rankings:
        return 0.0
    total = 0.0
    for qid in sorted(rankings):
        if qid not in gold:
            raise DataError(f"no gold document for query {qid!r}")
        ranking = list(rankings[qid])
        try:
            total += 1.0 / (ranking.index(gold[qid]) + 1)
        except ValueError:
            pass
    return total / len(rankings)


@dataclass(frozen=True)
class RelevanceJudgment:
    query_id: str
    doc_id: str
    gain: float = 1.0


def dcg(gains: Sequence[float]) -> float:
    return sum(g / math.log2(rank + 1) for rank, g in enumerate(gains, start=1))


def ndcg(ranking: Sequence[str], judgments: Sequence[RelevanceJudgment], k: int) -> float | None:
    """NDCG@k for one query; None when the query has no positive judgment."""
    gains = {}
    for j in judgments:
        if j.doc_id in gains:
            raise DataError(f"duplicate judgment for {j.query_id!r}/{j.doc_id!r}")
        if j.gain < 0:
            raise DataError("gains must be non-negative")
        gains[j.doc_id] = j.gain
    ideal = dcg(sorted(gains.values(), reverse=True)[:k])
    if ideal <= 0:
        return None
    return dcg([gains.get(d, 0.0) for d in list(ranking)[:k]]) / ideal


def mean_ndcg(rankings: Mapping[str, Sequence[str]], judgments: Sequence[RelevanceJudgment], k: int
              ) -> tuple[float, int]:
    """(mean NDCG over judged queries, number of queries skipped for lack of positives)."""
    by_query: dict[str, list[RelevanceJudgment]] = {}
    for j in judgments:
        by_query.setdefault(j.query_id, []).append(j)
    scores, skipped = [], 0
    for qid in sorted(rankings):
        value = ndcg(rankings[qid], by_query.get(qid, []), k)
        if value is None:
            skipped += 1
        else:
            scores.append(value)
    return (sum(scores) / len(scores) if scores else 0.0), skipped


# -- BLEU ----------------------------------------------------------------------

def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _bleu_from_counts(matches, totals, hyp_len, ref_len, max_n):
    if hyp_len == 0 or matches[0] == 0:
        return 0.0
    log_p = 0.0
    for n in range(max_n):
        m, t = matches[n], totals[n]
        if n > 0:
            m, t = m + 1, t + 1
        log_p += math.log(m / t) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    return bp * math.exp(log_p)


def _clipped(hyp, ref, max_n):
    matches, totals = [], []
    for n in range(1, max_n + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        matches.append(sum(min(c, r[g]) for g, c in h.items()))
        totals.append(max(len(hyp) - n + 1, 0))
    return matches, totals


def sentence_bleu(hyp: Sequence[str], ref: Sequence[str], max_n: int = 4) -> float:
    """BLEU-4 with brevity penalty and add-one smoothing on the n >= 2 precisions."""
    if not ref:
        raise ValueError("reference must be non-empty")
    matches, totals = _clipped(list(hyp), list(ref), max_n)
    return _bleu_from_counts(matches, totals, len(hyp), len(ref), max_n)


def corpus_bleu(hyps: Sequence[Sequence[str]], refs: Sequence[Sequence[str]], max_n: int = 4) -> float:
    """Corpus BLEU: n-gram counts and lengths are pooled before combining."""
    if len(hyps) != len(refs):
        raise ValueError("hypothesis and reference counts differ")
    matches, totals = [0] * max_n, [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        if not r:
            raise ValueError("reference must be non-empty")
        m, t = _clipped(list(h), list(r), max_n)
        matches = [a + b for a, b in zip(matches, m)]
        totals = [a + b for a, b in zip(totals, t)]
        hyp_len += len(h)
        ref_len += len(r)
    return _bleu_from_counts(matches, totals, hyp_len, ref_len, max_n)


def bleu4(hyp: Sequence[str] | str, ref: Sequence[str] | str, level: str = "word", bpe=None) -> float:
    """Sentence BLEU-4 at word level (code tokens) or BPE level.

    Strings are tokenized according to ``level``; token lists are used as given.
    """
    if isinstance(hyp, str) or isinstance(ref, str):
        from coderag.tokenize import filter_tokens
        if level == "word":
            tok = filter_tokens
        elif level == "bpe":
            if bpe is None:
                raise ValueError("BPE-level BLEU needs a BPE model")
            tok = bpe.tokens
        else:
            raise ValueError(f"unknown BLEU level {level!r}")
        hyp = tok(hyp) if isinstance(hyp, str) else hyp
        ref = tok(ref) if isinstance(ref, str) else ref
    return sentence_bleu(hyp, ref)


# -- edit distance ---------------------------------------------------------------

def token_edit_distance(hyp: Sequence, ref: Sequence) -> tuple[int, float]:
    """Levenshtein distance (unit costs) and the same divided by max(len(ref), 1)."""
    hyp, ref = list(hyp), list(ref)
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, start=1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    raw = prev[-1]
    return raw, raw / max(len(ref), 1)


# -- index quality -----------------------------------------------------------------

def ann_recall(approx: Sequence[Sequence[str]] | Mapping[str, Sequence[str]],
               exact: Sequence[Sequence[str]] | Mapping[str, Sequence[str]], k: int) -> float:
    """Mean over queries of |top-k(approx) & top-k(exact)| / k."""
    if isinstance(approx, Mapping) or isinstance(exact, Mapping):
        if not (isinstance(approx, Mapping) and isinstance(exact, Mapping)) or set(approx) != set(exact):
            raise ValueError("approximate and exact rankings cover different queries")
        keys = sorted(approx)
        approx = [approx[q] for q in keys]
        exact = [exact[q] for q in keys]
    if len(approx) != len(exact):
        raise ValueError("approximate and exact rankings cover different queries")
    if not approx:
        return 0.0
    total = sum(len(set(list(a)[:k]) & set(list(e)[:k])) / k for a, e in zip(approx, exact))
    return total / len(approx)


# -- reports ---------------------------------------------------------------------

@dataclass
class ReportRow:
    mode: str
    mrr: float
    ndcg: float
    bleu4_bpe: float
    bleu4_word: float
    edit_distance_mean: float
    edit_distance_norm: float
    n_queries: int


class EvalReport:
    HEADER = "# eval v1  bleu: 4-gram, brevity penalty, add-one smoothing for n>=2"

    def __init__(self, rows: Sequence[ReportRow] = ()):
        self.rows = list(rows)

    def add(self, row: ReportRow) -> None:
        self.rows.append(row)

    def modes(self) -> list[str]:
        return [r.mode for r in self.rows]

    def to_table(self) -> str:
        cols = ["mode", "n", "MRR", "NDCG", "BLEU-4(BPE)", "BLEU-4", "EDist", "EDist/len"]
        lines = [self.HEADER, "  ".join(f"{c:>11}" for c in cols)]
        for r in self.rows:
            vals = [r.mode, str(r.n_queries), f"{r.mrr:.4f}", f"{r.ndcg:.4f}",
                    f"{100 * r.bleu4_bpe:.2f}", f"{100 * r.bleu4_word:.2f}",
                    f"{r.edit_distance_mean:.2f}", f"{r.edit_distance_norm:.4f}"]
            lines.append("  ".join(f"{v:>11}" for v in vals))
        return "\n".join(lines) + "\n"

    def to_jsonl(self) -> str:
        out = [json.dumps({"format": "eval v1"})]
        out += [json.dumps(asdict(r), sort_keys=True) for r in self.rows]
        return "\n".join(out) + "\n"
