"""Turning records into the token-id sequences the two encoders consume."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from coderag.corpus import FunctionRecord, IntentSnippetRecord
from coderag.encoder import CODE, QUERY, EncoderPair, encode_batch
from coderag.tokenize import BpeModel, Vocabulary, tokenize_code, train_bpe


def code_text(rec: FunctionRecord | IntentSnippetRecord) -> str:
    """What the code encoder sees: signature + body (docstring excluded), or a snippet."""
    if isinstance(rec, IntentSnippetRecord):
        return rec.snippet
    return rec.signature + "\n" + rec.body


@dataclass
class Featurizer:
    bpe: BpeModel
    code_vocab: Vocabulary

    @classmethod
    def fit(cls, records: Sequence[FunctionRecord], bpe_vocab: int = 10_000,
            code_vocab: int = 10_000) -> "Featurizer":
        bpe = train_bpe([r.docstring for r in records], vocab_size=bpe_vocab)
        vocab = Vocabulary.build((tokenize_code(code_text(r)) for r in records), max_size=code_vocab)
        return cls(bpe, vocab)

    def query_ids(self, docstring: str) -> list[int]:
        return self.bpe.encode(docstring)

    def code_ids(self, rec) -> list[int]:
        return self.code_vocab.encode(tokenize_code(code_text(rec)))

    def pairs(self, records: Sequence[FunctionRecord]):
        return [(self.query_ids(r.docstring), self.code_ids(r)) for r in records]

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        self.bpe.save(out / "bpe.model")
        self.code_vocab.save(out / "code.vocab")

    @classmethod
    def load(cls, model_dir: str | Path) -> "Featurizer":
        d = Path(model_dir)
        return cls(BpeModel.load(d / "bpe.model"), Vocabulary.load(d / "code.vocab"))


def embed_code(pair: EncoderPair, feats: Featurizer, records, max_len: int = 200) -> np.ndarray:
    """Unnormalized code-side embeddings; records with no tokens get a zero row."""
    seqs = [feats.code_ids(r)[:max_len] or [feats.code_vocab.unk_id] for r in records]
    return encode_batch(pair.code, seqs, CODE)


def embed_queries(pair: EncoderPair, feats: Featurizer, texts: Sequence[str], max_len: int = 30) -> np.ndarray:
    seqs = [feats.query_ids(t)[:max_len] or [feats.bpe.unk_id] for t in texts]
    return encode_batch(pair.query, seqs, QUERY)


def unit_rows(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalize; returns (normalized rows, mask of rows that were non-zero)."""
    norms = np.linalg.norm(X, axis=1)
    ok = norms > 0
    out = np.zeros_like(X)
    out[ok] = X[ok] / norms[ok, None]
    return out, ok
