"""The end-to-end run: ingest, tokenize, train, embed, index, retrieve, pack, eval.

Every stage writes its artifacts under one output directory. Files are
written under a ``.partial`` name and renamed once complete, and every file
starts with a format-version header.
"""
from __future__ import annotations

import configparser
import io
import json
import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from coderag.corpus import (
    CorpusSplit, Diagnostics, FunctionRecord, filter_functions, read_function_corpus, split_corpus,
    write_records,
)
from coderag.encoder import EncoderPair, load_pair, save_pair
from coderag.errors import DataError
from coderag.featurize import Featurizer, code_text, embed_code, embed_queries, unit_rows
from coderag.index import AnnConfig, VectorStore, build_forest, export_embeddings, save_index
from coderag.metrics import (
    EvalReport, RelevanceJudgment, ReportRow, mean_ndcg, mrr, sentence_bleu, token_edit_distance,
)
from coderag.pack import PackConfig, PackedContext, pack_context, render_document
from coderag.retrieve import (
    MODES, Bm25Index, MmrConfig, SearchResult, bm25_search, compute_threshold, dedupe_target,
    dense_search, mmr_rerank, random_retrieve, rerank, threshold_retrieve,
)
from coderag.synthetic import fixture_paths
from coderag.tokenize import BpeModel, filter_tokens
from coderag.train import TrainConfig, train_retriever

logger = logging.getLogger(__name__)

CONFIG_HEADER = "# pipeline config v1"


# -- configuration -------------------------------------------------------------

def _fixture_train_config() -> TrainConfig:
    # sized for a corpus of a couple of hundred functions
    return TrainConfig(batch_size=32, lr=5e-3, epochs=40, d=64)


@dataclass
class PipelineConfig:
    functions: str = ""          # empty: the bundled fixture corpus
    out: str = "run"
    seed: int = 0
    threads: int = 1
    max_tokens: int = 150
    valid_size: int = 20
    test_size: int = 30
    bpe_vocab: int = 2000
    code_vocab: int = 10_000
    n_trees: int = 10
    leaf_size: int = 16
    search_k: int = 1000
    k: int = 10
    candidate_pool: int = 50
    mmr_lambda: float = 0.5
    threshold_sample: int = 1000
    window: int = 1024
    ndcg_k: int = 10
    modes: str = ",".join(MODES)
    train: TrainConfig = field(default_factory=_fixture_train_config)

    SECTIONS = {
        "run": ("functions", "out", "seed", "threads"),
        "corpus": ("max_tokens", "valid_size", "test_size"),
        "tokenize": ("bpe_vocab", "code_vocab"),
        "index": ("n_trees", "leaf_size", "search_k"),
        "retrieve": ("k", "candidate_pool", "mmr_lambda", "threshold_sample", "modes"),
        "pack": ("window",),
        "eval": ("ndcg_k",),
    }

    def mode_list(self) -> list[str]:
        modes = [m.strip() for m in self.modes.split(",") if m.strip()]
        for m in modes:
            if m not in MODES:
                raise DataError(f"unknown retrieval mode {m!r}")
        return modes

    def functions_path(self) -> Path:
        return Path(self.functions) if self.functions else fixture_paths()[0]

    @classmethod
    def from_ini(cls, path: str | Path | None = None, overrides: Mapping[str, object] | None = None
                 ) -> "PipelineConfig":
        """Read an INI file (optional), then apply flag overrides by field name."""
        parser = configparser.ConfigParser()
        if path is not None and not parser.read(path):
            raise DataError(f"cannot read config {path}")
        types = {f.name: f.type for f in fields(cls)}
        kwargs: dict[str, object] = {}
        for section, names in cls.SECTIONS.items():
            if not parser.has_section(section):
                continue
            for key in parser[section]:
                if key not in names:
                    raise DataError(f"unknown key {key!r} in [{section}]")
                kwargs[key] = {"int": int, "float": float}.get(types[key], str)(parser[section][key])
        train_values = dict(parser["train"]) if parser.has_section("train") else {}
        for key, value in (overrides or {}).items():
            if value is None:
                continue
            if key.startswith("train_"):
                train_values[key[len("train_"):]] = value
            elif key in types and key != "train":
                kwargs[key] = value
            else:
                raise DataError(f"unknown config key {key!r}")
        train = _fixture_train_config()
        if train_values:
            unknown = set(train_values) - {f.name for f in fields(TrainConfig)}
            if unknown:
                raise DataError(f"unknown keys in [train]: {sorted(unknown)}")
            explicit = TrainConfig.from_mapping(train_values)
            train = replace(train, **{k: getattr(explicit, k) for k in train_values})
        return cls(train=train, **kwargs)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for section, names in self.SECTIONS.items():
            parser[section] = {n: str(getattr(self, n)) for n in names}
        parser["train"] = {f.name: str(getattr(self.train, f.name)) for f in fields(TrainConfig)}
        buf = io.StringIO()
        parser.write(buf)
        return CONFIG_HEADER + "\n" + buf.getvalue()


# -- artifact writing ------------------------------------------------------------

def commit(path: Path, write: Callable[[Path], None]) -> Path:
    """Write via ``<path>.partial`` and rename into place when complete."""
    path.parent.mkdir(parents=True, exist_ok=True)
    partial = path.with_name(path.name + ".partial")
    write(partial)
    os.replace(partial, path)
    return path


def write_jsonl(path: Path, fmt: str, rows: Iterable[dict]) -> Path:
    def _write(p: Path) -> None:
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps({"format": fmt}) + "\n")
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return commit(path, _write)


def write_text(path: Path, text: str) -> Path:
    def _write(p: Path) -> None:
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    return commit(path, _write)


def read_jsonl(path: str | Path) -> list[dict]:
    """Rows of a line-delimited file, skipping a leading format header."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh):
            if not line.strip():
                continue
            obj = json.loads(line)
            if n == 0 and set(obj) == {"format"}:
                continue
            rows.append(obj)
    return rows


# -- scoring -------------------------------------------------------------------

@dataclass
class GenerationScores:
    bleu4_bpe: float
    bleu4_word: float
    edit_distance_mean: float
    edit_distance_norm: float
    n: int


def score_generation(hyps: Mapping[str, str], refs: Mapping[str, str], bpe: BpeModel) -> GenerationScores:
    """Mean sentence BLEU-4 (BPE and word level) and token edit distance, over ``refs``."""
    if not refs:
        raise DataError("no references to score against")
    bpe_b, word_b, raw_e, norm_e = [], [], [], []
    for qid in sorted(refs):
        hyp, ref = hyps.get(qid, ""), refs[qid]
        h_words, r_words = filter_tokens(hyp), filter_tokens(ref)
        if not r_words:
            raise DataError(f"reference for {qid!r} is empty")
        word_b.append(sentence_bleu(h_words, r_words))
        bpe_b.append(sentence_bleu(bpe.tokens(hyp), bpe.tokens(ref)))
        raw, norm = token_edit_distance(h_words, r_words)
        raw_e.append(raw)
        norm_e.append(norm)
    n = len(refs)
    return GenerationScores(float(np.mean(bpe_b)), float(np.mean(word_b)),
                            float(np.mean(raw_e)), float(np.mean(norm_e)), n)


def score_retrieval(rankings: Mapping[str, Sequence[str]], gold: Mapping[str, str], k: int
                    ) -> tuple[float, float]:
    """(MRR, NDCG@k) with the gold document as the single relevant one."""
    judgments = [RelevanceJudgment(q, d) for q, d in sorted(gold.items())]
    ndcg_value, _ = mean_ndcg(rankings, judgments, k)
    return mrr(rankings, gold), ndcg_value


# -- stages ----------------------------------------------------------------------

@dataclass
class RetrievalContext:
    """What every retrieval mode needs for one database."""

    store: VectorStore
    docs: dict[str, FunctionRecord]
    bm25: Bm25Index
    forest: object | None = None
    search_k: int | None = None


def _dense_pool(ctx: RetrievalContext, q: np.ndarray, size: int) -> list[SearchResult]:
    return dense_search(ctx.store, q, size, ctx.forest, ctx.search_k)


def retrieve_mode(mode: str, ctx: RetrievalContext, q: np.ndarray, query_text: str, cfg: PipelineConfig,
                  theta: float, seed: int, target: FunctionRecord | None = None) -> list[SearchResult]:
    """Results of one retrieval mode, with target-identical documents removed when ``target`` is set."""
    def clean(results):
        return dedupe_target(results, target, ctx.docs) if target is not None else rerank(results)

    if mode == "none":
        return []
    if mode == "bm25":
        hits = bm25_search(ctx.bm25, filter_tokens(query_text), cfg.candidate_pool)
        return clean(hits)[:cfg.k]
    if mode == "random":
        ids = random_retrieve(ctx.docs, min(cfg.k + 1, len(ctx.docs)), seed)
        rel = ctx.store.dots(q, np.asarray([ctx.store.position(i) for i in ids], dtype=np.int64))
        return clean(SearchResult(i, float(r), 0) for i, r in zip(ids, rel))[:cfg.k]
    pool = clean(_dense_pool(ctx, q, cfg.candidate_pool))
    if mode == "single":
        return pool[:1]
    if mode == "threshold":
        return threshold_retrieve(pool[0] if pool else None, theta)
    if mode == "full":
        return pool[:cfg.k]
    if mode == "mmr":
        mcfg = MmrConfig(lam=cfg.mmr_lambda, m=min(cfg.k, cfg.candidate_pool), candidate_pool=cfg.candidate_pool)
        rel = {r.doc_id: r.relevance for r in pool}
        chosen = mmr_rerank(q, [(r.doc_id, ctx.store.vector(r.doc_id)) for r in pool], mcfg)
        return rerank(SearchResult(i, rel[i], 0) for i in chosen)
    raise DataError(f"unknown retrieval mode {mode!r}")


def median_top1(ctx: RetrievalContext, pair: EncoderPair, feats: Featurizer, records: Sequence[FunctionRecord],
                cfg: PipelineConfig) -> float:
    """Gating threshold: median top-1 relevance of training queries, own function excluded."""
    sample = sorted(records, key=lambda r: r.id)[:cfg.threshold_sample]
    Q, ok = unit_rows(embed_queries(pair, feats, [r.docstring for r in sample], cfg.train.max_query_len))
    scores = []
    for rec, q, good in zip(sample, Q, ok):
        if not good:
            continue
        pool = dedupe_target(_dense_pool(ctx, q, 2), rec, ctx.docs)
        if pool:
            scores.append(pool[0].relevance)
    return compute_threshold(scores)


def ingest(cfg: PipelineConfig) -> tuple[CorpusSplit, Diagnostics, int]:
    diag = Diagnostics()
    records = read_function_corpus(cfg.functions_path(), diag)
    kept = filter_functions(records, cfg.max_tokens)
    return split_corpus(kept, cfg.valid_size, cfg.test_size, cfg.seed), diag, len(records) - len(kept)


def embed_store(pair: EncoderPair, feats: Featurizer, records: Sequence[FunctionRecord], max_len: int
                ) -> VectorStore:
    X, ok = unit_rows(embed_code(pair, feats, records, max_len))
    ids = [r.id for r, good in zip(records, ok) if good]
    return VectorStore(ids, X[ok])


def load_model(params: str | Path) -> tuple[EncoderPair, Featurizer]:
    """Encoder pair plus the tokenizer files stored beside it."""
    params = Path(params)
    return load_pair(params), Featurizer.load(params.parent)


def run_pipeline(cfg: PipelineConfig) -> EvalReport:
    out = Path(cfg.out)
    modes = cfg.mode_list()
    write_text(out / "config.ini", cfg.to_ini())

    # ingest
    split, diag, n_filtered = ingest(cfg)
    corpus_dir = out / "corpus"
    corpus_dir.mkdir(parents=True, exist_ok=True)
    commit(corpus_dir / "train.jsonl", lambda p: _save_part(split, "train", p))
    commit(corpus_dir / "valid.jsonl", lambda p: _save_part(split, "valid", p))
    commit(corpus_dir / "test.jsonl", lambda p: _save_part(split, "test", p))
    write_text(corpus_dir / "diagnostics.txt",
               "# diagnostics v1\n" + "".join(f"{k}\t{v}\n" for k, v in sorted(diag.counts.items()))
               + f"filtered\t{n_filtered}\n")
    logger.info("corpus: %d train / %d valid / %d test", len(split.train), len(split.valid), len(split.test))

    # tokenize
    model_dir = out / "model"
    feats = Featurizer.fit(split.train, cfg.bpe_vocab, cfg.code_vocab)
    commit(model_dir / "bpe.model", feats.bpe.save)
    commit(model_dir / "code.vocab", feats.code_vocab.save)

    # train
    tcfg = replace(cfg.train, seed=cfg.seed)
    result = train_retriever(tcfg, feats.pairs(split.train), feats.bpe.vocab_size, len(feats.code_vocab))
    commit(model_dir / "params.fenc", lambda p: save_pair(result.pair, p))
    write_text(model_dir / "loss.csv", "# loss v1\nepoch,loss\n" + result.loss_curve())
    pair = load_pair(model_dir / "params.fenc")   # downstream uses exactly what was persisted

    # embed + index the template database (training functions)
    db = embed_store(pair, feats, split.train, tcfg.max_code_len)
    commit(out / "index" / "db.emb", lambda p: export_embeddings(db, p))
    forest = build_forest(db, AnnConfig(n_trees=cfg.n_trees, search_k=cfg.search_k, leaf_size=cfg.leaf_size),
                          seed=cfg.seed)
    commit(out / "index" / "db.idx", lambda p: save_index(forest, db, p))
    train_docs = {r.id: r for r in split.train}
    ctx = RetrievalContext(db, train_docs, Bm25Index.from_records(split.train), forest, cfg.search_k)
    theta = median_top1(ctx, pair, feats, split.train, cfg)

    # retrieval quality over the held-out pool
    test = sorted(split.test, key=lambda r: r.id)
    test_docs = {r.id: r for r in test}
    # the query is the gold function's own docstring, so the pool is indexed without docstrings
    test_ctx = RetrievalContext(embed_store(pair, feats, test, tcfg.max_code_len), test_docs,
                                Bm25Index.from_records(test, text=code_text))
    Q, q_ok = unit_rows(embed_queries(pair, feats, [r.docstring for r in test], tcfg.max_query_len))
    gold = {r.id: r.id for r in test}
    write_jsonl(out / "eval" / "gold.jsonl", "gold v1", ({"query_id": q, "doc_id": d} for q, d in gold.items()))
    write_jsonl(out / "eval" / "queries.jsonl", "queries v1",
                ({"query_id": r.id, "docstring": r.docstring} for r in test))

    report = EvalReport()
    for mode in modes:
        rankings, retrieved, packed, hyps = {}, [], [], {}
        for n, (rec, q, good) in enumerate(zip(test, Q, q_ok)):
            seed = cfg.seed * 1_000_003 + n
            pool_hits = retrieve_mode(mode, test_ctx, q, rec.docstring, cfg, theta, seed) if good else []
            rankings[rec.id] = [h.doc_id for h in pool_hits]
            hits = retrieve_mode(mode, ctx, q, rec.docstring, cfg, theta, seed, target=rec) if good else []
            retrieved.append(ranked_row(rec.id, hits))
            ctx_docs = [(h.doc_id, render_document(train_docs[h.doc_id])) for h in hits]
            pc = pack_context((rec.signature, rec.docstring), ctx_docs, feats.bpe,
                              PackConfig(window=cfg.window, mode=mode))
            packed.append(packed_row(rec.id, pc, rec.body))
            hyps[rec.id] = train_docs[pc.provenance[0].source].body if pc.n_retrieved else ""
        write_jsonl(out / "retrieve" / f"{mode}.jsonl", "retrieved v1", retrieved)
        write_jsonl(out / "retrieve" / f"pool_{mode}.jsonl", "rankings v1",
                    ({"query_id": q, "ranking": r} for q, r in rankings.items()))
        write_jsonl(out / "pack" / f"{mode}.jsonl", "packed v1", packed)
        write_jsonl(out / "hyps" / f"{mode}.jsonl", "hyps v1",
                    ({"query_id": q, "hypothesis_text": h} for q, h in hyps.items()))
        mrr_value, ndcg_value = score_retrieval(rankings, gold, cfg.ndcg_k)
        gen = score_generation(hyps, {r.id: r.body for r in test}, feats.bpe)
        report.add(ReportRow(mode=mode, mrr=mrr_value, ndcg=ndcg_value, bleu4_bpe=gen.bleu4_bpe,
                             bleu4_word=gen.bleu4_word, edit_distance_mean=gen.edit_distance_mean,
                             edit_distance_norm=gen.edit_distance_norm, n_queries=len(test)))
    write_text(out / "eval" / "report.txt", report.to_table() + f"# threshold {theta!r}\n")
    write_text(out / "eval" / "report.jsonl", report.to_jsonl())
    return report


def _save_part(split: CorpusSplit, name: str, path: Path) -> None:
    write_records(getattr(split, name), path)


def packed_row(query_id: str, pc: PackedContext, target_body: str | None = None) -> dict:
    return {
        "query_id": query_id,
        "context_text": pc.text,
        "n_retrieved": pc.n_retrieved,
        "n_tokens": len(pc.token_ids),
        "provenance": [[s.start, s.end, s.source] for s in pc.provenance],
        "target_body": target_body,
        "token_ids": pc.token_ids,
    }


def ranked_row(query_id: str, hits: Sequence[SearchResult]) -> dict:
    return {"query_id": query_id, "ranked": [[h.doc_id, h.relevance] for h in hits]}
