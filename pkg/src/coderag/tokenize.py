"""Code tokenization (filter / subtoken modes) and a byte-pair encoder for docstrings."""
from __future__ import annotations

import heapq
import re
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from coderag.errors import DataError

_CODE_TOKEN = re.compile(r"\w+|[^\w\s]", re.UNICODE)
_CAMEL = re.compile(r"(?<=[a-z0-9])(?=[A-Z])|(?<=[A-Z])(?=[A-Z][a-z])")

FILTER = "filter"
SUBTOKEN = "subtoken"


@dataclass(frozen=True)
class CodeTokenRules:
    mode: str = SUBTOKEN
    lowercase: bool = True

    def __post_init__(self):
        if self.mode not in (FILTER, SUBTOKEN):
            raise ValueError(f"unknown tokenization mode {self.mode!r}")


FILTER_RULES = CodeTokenRules(mode=FILTER, lowercase=False)
SUBTOKEN_RULES = CodeTokenRules(mode=SUBTOKEN, lowercase=True)


def split_identifier(word: str) -> list[str]:
    """Split at underscores and camel-case boundaries: getUserName_v2 -> get User Name v2."""
    parts = []
    for chunk in word.split("_"):
        if chunk:
            parts.extend(p for p in _CAMEL.split(chunk) if p)
    return parts


def tokenize_code(text: str, rules: CodeTokenRules = SUBTOKEN_RULES) -> list[str]:
    """Identifier runs and single punctuation characters; whitespace is dropped.

    In subtoken mode identifiers are further split and (optionally) lowercased.
    """
    tokens = _CODE_TOKEN.findall(text)
    if rules.mode == FILTER:
        return tokens
    out = []
    for tok in tokens:
        if tok[0].isalnum() or tok[0] == "_":
            pieces = split_identifier(tok)
            if rules.lowercase:
                pieces = [p.lower() for p in pieces]
            out.extend(pieces)
        else:
            out.append(tok)
    return out


def filter_tokens(text: str) -> list[str]:
    return tokenize_code(text, FILTER_RULES)


# -- byte-pair encoding ------------------------------------------------------

EOW = "</w>"
UNK = "<unk>"
PAD = "<pad>"
BPE_HEADER = "bpe v1"


class BpeModel:
    """Trained merges plus the resulting vocabulary.

    Ids: 0 = UNK, 1 = PAD, then base symbols (sorted), then one id per merge in
    training order.
    """

    unk_id = 0
    pad_id = 1

    def __init__(self, alphabet: Iterable[str], merges: Sequence[tuple[str, str]]):
        self.alphabet = tuple(sorted(set(alphabet) | {EOW}))
        self.merges = [tuple(m) for m in merges]
        tokens = [UNK, PAD, *self.alphabet]
        known = set(tokens)
        for a, b in self.merges:
            if a not in known or b not in known:
                raise DataError(f"merge ({a!r}, {b!r}) uses a symbol not derived earlier")
            merged = a + b
            if merged not in known:
                known.add(merged)
            tokens.append(merged)
        self.id_to_token = tokens
        self.vocab: dict[str, int] = {}
        for i, tok in enumerate(tokens):
            self.vocab.setdefault(tok, i)
        self._ranks = {m: r for r, m in enumerate(self.merges)}
        self._cache: dict[str, tuple[str, ...]] = {}

    @property
    def vocab_size(self) -> int:
        return len(self.id_to_token)

    @property
    def base_size(self) -> int:
        return 2 + len(self.alphabet)

    def segment(self, word: str) -> tuple[str, ...]:
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        symbols = list(word) + [EOW]
        ranks = self._ranks
        while len(symbols) > 1:
            best = None
            best_rank = None
            for i in range(len(symbols) - 1):
                r = ranks.get((symbols[i], symbols[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = i, r
            if best is None:
                break
            pair = (symbols[best], symbols[best + 1])
            merged = pair[0] + pair[1]
            i, out = 0, []
            while i < len(symbols):
                if i < len(symbols) - 1 and (symbols[i], symbols[i + 1]) == pair:
                    out.append(merged)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            symbols = out
        result = tuple(symbols)
        if len(self._cache) < 200_000:
            self._cache[word] = result
        return result

    def tokens(self, text: str) -> list[str]:
        out = []
        for word in text.split():
            out.extend(self.segment(word))
        return out

    def encode(self, text: str) -> list[int]:
        vocab = self.vocab
        return [vocab.get(t, self.unk_id) for t in self.tokens(text)]

    def decode(self, ids: Iterable[int]) -> str:
        text = "".join(self.id_to_token[i] for i in ids)
        return text.replace(EOW, " ").strip()

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"{BPE_HEADER} {self.vocab_size}\n")
            for sym in self.alphabet:
                if sym != EOW:
                    fh.write(f"{sym}\n")
            for a, b in self.merges:
                fh.write(f"{a} {b}\n")

    @classmethod
    def load(cls, path: str | Path) -> "BpeModel":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().split()
            if header[:2] != BPE_HEADER.split() or len(header) != 3:
                raise DataError(f"{path}: not a bpe v1 model")
            alphabet, merges = [], []
            for line in fh:
                fields = line.rstrip("\n").split(" ")
                if len(fields) == 1 and fields[0]:
                    alphabet.append(fields[0])
                elif len(fields) == 2:
                    merges.append((fields[0], fields[1]))
                elif line.strip():
                    raise DataError(f"{path}: bad line {line!r}")
        model = cls(alphabet, merges)
        if model.vocab_size != int(header[2]):
            raise DataError(f"{path}: header says vocab {header[2]}, rebuilt {model.vocab_size}")
        return model


def _pairs_of(symbols: tuple[str, ...]) -> Counter:
    return Counter(zip(symbols, symbols[1:]))


def train_bpe(texts: Iterable[str], vocab_size: int = 10_000, min_frequency: int = 2) -> BpeModel:
    """Greedy pair merging on whitespace-split words with an end-of-word marker.

    The most frequent adjacent pair is merged at each step (ties go to the
    lexicographically smallest pair) until ``vocab_size`` is reached or no
    pair occurs ``min_frequency`` times.
    """
    word_freq: Counter = Counter()
    for text in texts:
        word_freq.update(text.split())
    alphabet = {ch for w in word_freq for ch in w}
    base = 2 + len(alphabet | {EOW})
    if vocab_size <= base:
        raise DataError(f"vocab_size {vocab_size} must exceed the base alphabet size {base}")

    words = [tuple(w) + (EOW,) for w in sorted(word_freq)]
    freqs = [word_freq[w] for w in sorted(word_freq)]
    stats: Counter = Counter()
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for i, (sym, f) in enumerate(zip(words, freqs)):
        for pair, c in _pairs_of(sym).items():
            stats[pair] += c * f
            where[pair].add(i)

    # max-heap on (count, then smallest pair) with lazy invalidation
    heap = [(-c, p) for p, c in stats.items()]
    heapq.heapify(heap)
    merges: list[tuple[str, str]] = []
    n_tokens = base
    while n_tokens < vocab_size and heap:
        neg, pair = heapq.heappop(heap)
        if stats.get(pair, 0) != -neg:
            continue
        if -neg < min_frequency:
            break
        merges.append(pair)
        n_tokens += 1
        merged = pair[0] + pair[1]
        touched = set()
        for i in sorted(where.pop(pair, ())):
            old = words[i]
            new, j = [], 0
            while j < len(old):
                if j < len(old) - 1 and old[j] == pair[0] and old[j + 1] == pair[1]:
                    new.append(merged)
                    j += 2
                else:
                    new.append(old[j])
                    j += 1
            new_t = tuple(new)
            f = freqs[i]
            for p, c in _pairs_of(old).items():
                stats[p] -= c * f
                if stats[p] <= 0:
                    del stats[p]
                if p != pair:
                    where[p].discard(i)
                touched.add(p)
            for p, c in _pairs_of(new_t).items():
                stats[p] += c * f
                where[p].add(i)
                touched.add(p)
            words[i] = new_t
        stats.pop(pair, None)
        for p in touched:
            if p in stats:
                heapq.heappush(heap, (-stats[p], p))
    return BpeModel(alphabet, merges)


# -- code vocabulary ---------------------------------------------------------

VOCAB_HEADER = "vocab v1"


class Vocabulary:
    """Frequency-capped token table for the code side (0 = UNK, 1 = PAD)."""

    unk_id = 0
    pad_id = 1

    def __init__(self, tokens: Sequence[str]):
        self.id_to_token = [UNK, PAD, *tokens]
        self.index = {t: i for i, t in enumerate(self.id_to_token)}

    @classmethod
    def build(cls, token_lists: Iterable[Sequence[str]], max_size: int = 10_000) -> "Vocabulary":
        counts: Counter = Counter()
        for toks in token_lists:
            counts.update(toks)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls([t for t, _ in ranked[:max_size]])

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.index.get(t, self.unk_id) for t in tokens]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"{VOCAB_HEADER} {len(self)}\n")
            for tok in self.id_to_token[2:]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().split()
            if header[:2] != VOCAB_HEADER.split():
                raise DataError(f"{path}: not a vocab v1 file")
            tokens = [line.rstrip("\n") for line in fh]
        vocab = cls(tokens)
        if len(vocab) != int(header[2]):
            raise DataError(f"{path}: header size mismatch")
        return vocab
