"""Assemble retrieved documents and the query into a generator-sized context."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

from coderag.corpus import FunctionRecord, IntentSnippetRecord
from coderag.tokenize import BpeModel

logger = logging.getLogger(__name__)

SEPARATOR = "\n# ---\n"
QUERY_SOURCE = "query"
PACK_MODES = ("none", "single", "threshold", "full", "mmr", "random", "bm25")


def _indent_of(text: str) -> str:
    for line in text.split("\n"):
        if line.strip():
            return line[:len(line) - len(line.lstrip())]
    return "    "


def render_docstring(docstring: str, indent: str) -> str:
    lines = docstring.split("\n")
    if len(lines) == 1:
        return f'{indent}"""{docstring}"""'
    body = "\n".join((indent + l) if l else "" for l in lines[1:])
    return f'{indent}"""{lines[0]}\n{body}\n{indent}"""'


def render_document(doc: FunctionRecord | IntentSnippetRecord) -> str:
    """Function: signature, docstring block, body. Intent-snippet: ``# intent`` then snippet."""
    if isinstance(doc, IntentSnippetRecord):
        return f"# {doc.intent}\n{doc.snippet}"
    indent = _indent_of(doc.body) if doc.body.strip() else "    "
    parts = [doc.signature]
    if doc.docstring:
        parts.append(render_docstring(doc.docstring, indent))
    if doc.body:
        parts.append(doc.body)
    return "\n".join(parts)


def render_query(signature: str, docstring: str) -> str:
    return signature + "\n" + render_docstring(docstring, "    ") if docstring else signature


@dataclass(frozen=True)
class PackConfig:
    window: int = 1024
    mode: str = "full"

    def __post_init__(self):
        if self.mode not in PACK_MODES:
            raise ValueError(f"unknown pack mode {self.mode!r}")
        if self.window < 1:
            raise ValueError("window must be positive")


@dataclass(frozen=True)
class Span:
    start: int
    end: int
    source: str    # "query" or a document id


@dataclass
class PackedContext:
    token_ids: list[int]
    provenance: list[Span]
    n_retrieved: int
    text: str = ""

    def span_ids(self, span: Span) -> list[int]:
        return self.token_ids[span.start:span.end]


class QueryTooLong(ValueError):
    pass


def pack_context(query: tuple[str, str], retrieved: Sequence[tuple[str, str]], bpe: BpeModel,
                 cfg: PackConfig) -> PackedContext:
    """Greedily include whole documents, in order, while the query still fits last.

    ``retrieved`` holds (doc_id, rendered text) already ordered for the mode.
    Each document is followed by the separator. Packing stops at the first
    document that does not fit.
    """
    q_text = render_query(*query)
    q_ids = bpe.encode(q_text)
    if len(q_ids) > cfg.window:
        raise QueryTooLong(f"query needs {len(q_ids)} tokens, window is {cfg.window}")
    ids: list[int] = []
    spans: list[Span] = []
    texts: list[str] = []
    if cfg.mode != "none":
        for doc_id, text in retrieved:
            piece = text + SEPARATOR
            piece_ids = bpe.encode(piece)
            if len(ids) + len(piece_ids) + len(q_ids) > cfg.window:
                break
            spans.append(Span(len(ids), len(ids) + len(piece_ids), doc_id))
            ids.extend(piece_ids)
            texts.append(piece)
    n_docs = len(spans)
    spans.append(Span(len(ids), len(ids) + len(q_ids), QUERY_SOURCE))
    ids.extend(q_ids)
    return PackedContext(token_ids=ids, provenance=spans, n_retrieved=n_docs,
                         text="".join(texts) + q_text)
