"""A small read-only HTTP search service over a trained encoder and index.

Snapshots are loaded once at startup; request handlers only read them, so
concurrent requests need no locking.
"""
from __future__ import annotations

import json
import logging
import threading
import time
import uuid
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from types import MappingProxyType
from typing import Mapping
from urllib.parse import parse_qs, unquote, urlsplit

import numpy as np

from coderag.corpus import FunctionRecord, load_split
from coderag.encoder import QUERY, EncoderPair, encode, load_pair
from coderag.index import RpForest, VectorStore, load_index
from coderag.pack import render_document
from coderag.retrieve import MmrConfig, dense_search, mmr_rerank, rerank, SearchResult
from coderag.tokenize import EOW, BpeModel

logger = logging.getLogger(__name__)


class RequestError(ValueError):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


@dataclass(frozen=True)
class SearchRequest:
    q: str
    k: int = 10
    mode: str = "topk"
    lam: float = 0.5

    @classmethod
    def from_params(cls, params: Mapping[str, object]) -> "SearchRequest":
        q = str(params.get("q") or "")
        if not q.strip():
            raise RequestError(400, "q must be a non-empty string")
        try:
            k = int(params.get("k", 10))
            lam = float(params.get("lambda", 0.5))
        except (TypeError, ValueError):
            raise RequestError(400, "k must be an integer and lambda a number") from None
        mode = str(params.get("mode", "topk"))
        if k < 1:
            raise RequestError(400, "k must be >= 1")
        if not 0.0 <= lam <= 1.0:
            raise RequestError(400, "lambda must lie in [0, 1]")
        if mode not in ("topk", "mmr"):
            raise RequestError(400, "mode must be topk or mmr")
        return cls(q=q, k=k, mode=mode, lam=lam)


class Snapshot:
    """Encoder, index and documents, frozen at load time."""

    def __init__(self, pair: EncoderPair, bpe: BpeModel, forest: RpForest, store: VectorStore,
                 docs: Mapping[str, FunctionRecord], search_k: int = 10_000, candidate_pool: int = 100,
                 max_query_len: int = 30):
        missing = [i for i in store.ids if i not in docs]
        if missing:
            raise ValueError(f"{len(missing)} indexed ids are missing from the corpus, e.g. {missing[0]!r}")
        for p in (pair.query, pair.code):
            for arr in p.tensors().values():
                arr.setflags(write=False)
        self.pair = pair
        self.bpe = bpe
        self.forest = forest
        self.store = store
        self.docs = MappingProxyType(dict(docs))
        self.search_k = search_k
        self.candidate_pool = candidate_pool
        self.max_query_len = max_query_len

    @classmethod
    def load(cls, params: str | Path, idx: str | Path, corpus: str | Path, bpe: str | Path | None = None,
             **kw) -> "Snapshot":
        bpe_path = Path(bpe) if bpe else Path(params).with_name("bpe.model")
        forest, store = load_index(idx)
        docs = {r.id: r for r in load_split(corpus).all()}
        return cls(load_pair(params), BpeModel.load(bpe_path), forest, store, docs, **kw)

    def query_vector(self, text: str) -> np.ndarray:
        ids = self.bpe.encode(text)[:self.max_query_len]
        # unknown characters leave only UNK and bare end-of-word ids behind
        content = set(ids) - {self.bpe.unk_id, self.bpe.vocab.get(EOW)}
        if not content:
            raise RequestError(422, "query has no known tokens")
        v = encode(self.pair.query, ids, QUERY)
        n = float(np.sqrt(v @ v))
        if n == 0.0 or not np.isfinite(n):
            raise RequestError(422, "query encodes to a zero vector")
        return v / n

    def search(self, req: SearchRequest) -> list[SearchResult]:
        q = self.query_vector(req.q)
        k = min(req.k, len(self.store))
        if req.mode == "topk":
            return dense_search(self.store, q, k, self.forest, max(self.search_k, k))
        size = max(self.candidate_pool, k)
        pool = dense_search(self.store, q, size, self.forest, max(self.search_k, size))
        rel = {r.doc_id: r.relevance for r in pool}
        cfg = MmrConfig(lam=req.lam, m=k, candidate_pool=size)
        chosen = mmr_rerank(q, [(r.doc_id, self.store.vector(r.doc_id)) for r in pool], cfg)
        return rerank(SearchResult(i, rel[i], 0) for i in chosen)

    def handle_search(self, req: SearchRequest) -> dict:
        start = time.perf_counter()
        results = self.search(req)
        return {
            "results": [{"doc_id": r.doc_id, "score": r.relevance,
                         "rendered_document": render_document(self.docs[r.doc_id])} for r in results],
            "latency_ms": (time.perf_counter() - start) * 1000.0,
        }


class SearchHandler(BaseHTTPRequestHandler):
    server_version = "coderag/0.1"
    protocol_version = "HTTP/1.1"
    snapshot: Snapshot   # set on the subclass built by make_server

    def log_message(self, fmt, *args):
        logger.debug("%s - " + fmt, self.address_string(), *args)

    def _send(self, status: int, body: bytes, content_type: str) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _json(self, status: int, obj: dict) -> None:
        self._send(status, json.dumps(obj, sort_keys=True).encode("utf-8"), "application/json")

    def _dispatch(self, params: Mapping[str, object] | None) -> None:
        path = urlsplit(self.path).path
        try:
            if path == "/health":
                self._send(200, b"ok", "text/plain; charset=utf-8")
            elif path == "/search":
                if params is None:
                    params = {k: v[-1] for k, v in parse_qs(urlsplit(self.path).query).items()}
                self._json(200, self.snapshot.handle_search(SearchRequest.from_params(params)))
            elif path.startswith("/doc/"):
                doc = self.snapshot.docs.get(unquote(path[len("/doc/"):]))
                if doc is None:
                    self._json(404, {"error": "no such document"})
                else:
                    self._send(200, render_document(doc).encode("utf-8"), "text/plain; charset=utf-8")
            else:
                self._json(404, {"error": "not found"})
        except RequestError as exc:
            self._json(exc.status, {"error": str(exc)})
        except Exception:
            error_id = uuid.uuid4().hex
            logger.exception("request failed (error id %s)", error_id)
            self._json(500, {"error": "internal error", "id": error_id})

    def do_GET(self):
        self._dispatch(None)

    def do_POST(self):
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        if urlsplit(self.path).path != "/search":
            self._json(405, {"error": "POST is only accepted on /search"})
            return
        try:
            body = json.loads(raw.decode("utf-8")) if raw else {}
            if not isinstance(body, dict):
                raise ValueError
        except ValueError:
            self._json(400, {"error": "body must be a JSON object"})
            return
        self._dispatch(body)


def make_server(snapshot: Snapshot, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    handler = type("BoundSearchHandler", (SearchHandler,), {"snapshot": snapshot})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server


def serve_in_thread(snapshot: Snapshot, host: str = "127.0.0.1", port: int = 0
                    ) -> tuple[ThreadingHTTPServer, threading.Thread]:
    """Start a server on a background thread (port 0 picks a free port)."""
    server = make_server(snapshot, host, port)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, thread
