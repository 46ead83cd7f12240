"""Command-line entry point: ``coderag <command> ...``.

Exit status: 0 success, 2 usage error, 3 data error, 4 internal error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from coderag.errors import DataError, InvariantError
from coderag.retrieve import MODES

logger = logging.getLogger("coderag")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4


# -- handlers --------------------------------------------------------------------

def cmd_corpus_ingest(args) -> int:
    from coderag.corpus import (
        Diagnostics, filter_functions, parse_intent_snippets, read_function_corpus, split_corpus, write_records,
    )
    from coderag.pipeline import commit, write_text

    out = Path(args.out)
    diag = Diagnostics()
    records = read_function_corpus(args.functions, diag)
    kept = filter_functions(records, args.max_tokens)
    split = split_corpus(kept, args.valid_size, args.test_size, args.seed)
    for name in ("train", "valid", "test"):
        commit(out / f"{name}.jsonl", lambda p, n=name: write_records(getattr(split, n), p))
    if args.intents:
        with open(args.intents, encoding="utf-8") as fh:
            intents = parse_intent_snippets(fh, args.top_n, diag)
        commit(out / "intents.jsonl", lambda p: write_records(intents, p))
    write_text(out / "diagnostics.txt", "# diagnostics v1\n"
               + "".join(f"{k}\t{v}\n" for k, v in sorted(diag.counts.items()))
               + f"filtered\t{len(records) - len(kept)}\n")
    print(f"{len(records)} parsed, {len(kept)} kept: "
          f"{len(split.train)} train / {len(split.valid)} valid / {len(split.test)} test")
    return EXIT_OK


def cmd_tok_train_bpe(args) -> int:
    from coderag.corpus import load_split
    from coderag.pipeline import commit
    from coderag.tokenize import train_bpe

    if args.texts:
        with open(args.texts, encoding="utf-8") as fh:
            texts = [line.rstrip("\n") for line in fh]
    elif args.corpus:
        texts = [r.docstring for r in load_split(args.corpus).train]
    else:
        raise DataError("give --in <texts> or --corpus <dir>")
    bpe = train_bpe(texts, args.vocab_size, args.min_frequency)
    commit(Path(args.out), bpe.save)
    print(f"bpe vocabulary {bpe.vocab_size} ({len(bpe.merges)} merges)")
    return EXIT_OK


def cmd_tok_encode(args) -> int:
    from coderag.tokenize import BpeModel
    bpe = BpeModel.load(args.model)
    text = args.text if args.text is not None else sys.stdin.read()
    print(" ".join(str(i) for i in bpe.encode(text)))
    return EXIT_OK


def _train_config(args):
    from coderag.train import TrainConfig
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {k: getattr(args, k) for k in ("epochs", "batch_size", "lr", "d", "seed", "architecture")
                 if getattr(args, k) is not None}
    return replace(cfg, **overrides)


def cmd_train(args) -> int:
    from coderag.corpus import load_split
    from coderag.encoder import save_pair
    from coderag.featurize import Featurizer
    from coderag.pipeline import commit, write_text
    from coderag.train import train_retriever

    cfg = _train_config(args)
    params = Path(args.out)
    model_dir = params.parent
    split = load_split(args.corpus)
    feats = Featurizer.fit(split.train, args.bpe_vocab, args.code_vocab)
    commit(model_dir / "bpe.model", feats.bpe.save)
    commit(model_dir / "code.vocab", feats.code_vocab.save)
    result = train_retriever(cfg, feats.pairs(split.train), feats.bpe.vocab_size, len(feats.code_vocab),
                             log_every=args.log_every)
    commit(params, lambda p: save_pair(result.pair, p))
    write_text(params.with_suffix(".loss.csv"), "# loss v1\nepoch,loss\n" + result.loss_curve())
    print(f"final loss {result.losses[-1]:.4f} after {cfg.epochs} epochs")
    return EXIT_OK


def cmd_index_embed(args) -> int:
    from coderag.corpus import load_split
    from coderag.index import export_embeddings
    from coderag.pipeline import commit, embed_store, load_model

    pair, feats = load_model(args.params)
    split = load_split(args.corpus)
    records = getattr(split, args.split) if args.split != "all" else split.all()
    store = embed_store(pair, feats, records, args.max_code_len)
    commit(Path(args.out), lambda p: export_embeddings(store, p))
    print(f"embedded {len(store)} of {len(records)} functions")
    return EXIT_OK


def cmd_index_build(args) -> int:
    from coderag.index import AnnConfig, build_forest, import_embeddings, save_index
    from coderag.pipeline import commit

    store = import_embeddings(args.emb)
    forest = build_forest(store, AnnConfig(n_trees=args.trees, leaf_size=args.leaf), seed=args.seed)
    commit(Path(args.out), lambda p: save_index(forest, store, p))
    print(f"indexed {len(store)} vectors in {args.trees} trees")
    return EXIT_OK


def _encode_query(params: str, text: str, max_len: int = 30) -> np.ndarray:
    from coderag.encoder import QUERY, encode, normalize
    from coderag.pipeline import load_model

    pair, feats = load_model(params)
    ids = feats.query_ids(text)[:max_len]
    if not ids:
        raise DataError("query has no tokens")
    return normalize(encode(pair.query, ids, QUERY))


def cmd_index_query(args) -> int:
    from coderag.index import ann_search, load_index, read_embeddings

    forest, store = load_index(args.idx)
    if args.emb_query:
        qids, Q = read_embeddings(args.emb_query)
        queries = [(qid, np.asarray(v, np.float64) / np.linalg.norm(v)) for qid, v in zip(qids, Q)]
    elif args.encode is not None:
        if not args.params:
            raise DataError("--encode needs --params")
        queries = [("query", _encode_query(args.params, args.encode))]
    else:
        raise DataError("give --emb-query <file> or --encode <text>")
    k = min(args.k, len(store))
    for qid, q in queries:
        for doc_id, dist in ann_search(forest, store, q, k, max(args.search_k, k)):
            print(f"{qid}\t{doc_id}\t{dist:.6f}")
    return EXIT_OK


def cmd_retrieve(args) -> int:
    from coderag.corpus import load_split
    from coderag.featurize import embed_queries, unit_rows
    from coderag.index import load_index
    from coderag.pipeline import (
        PipelineConfig, RetrievalContext, load_model, median_top1, ranked_row, read_jsonl, retrieve_mode,
        write_jsonl,
    )
    from coderag.retrieve import Bm25Index

    forest, store = load_index(args.idx)
    split = load_split(args.corpus)
    everything = {r.id: r for r in split.all()}
    indexed = set(store.ids)
    records = [r for r in split.all() if r.id in indexed]
    docs = {r.id: r for r in records}
    ctx = RetrievalContext(store, docs, Bm25Index.from_records(records), forest, args.search_k)
    cfg = PipelineConfig(k=args.k, candidate_pool=max(args.candidate_pool, args.k), mmr_lambda=args.lam)
    pair, feats = load_model(args.params)
    if args.queries:
        queries = [(str(r["query_id"]), r["docstring"]) for r in read_jsonl(args.queries)]
    elif args.q is not None:
        queries = [("query", args.q)]
    else:
        raise DataError("give --queries <file> or --q <text>")
    theta = args.threshold
    if theta is None and args.mode == "threshold":
        theta = median_top1(ctx, pair, feats, [r for r in split.train if r.id in indexed], cfg)
    Q, ok = unit_rows(embed_queries(pair, feats, [t for _, t in queries]))
    rows = []
    for n, ((qid, text), q, good) in enumerate(zip(queries, Q, ok)):
        if not good:
            raise DataError(f"query {qid!r} encodes to a zero vector")
        target = everything.get(qid) if args.dedupe else None
        hits = retrieve_mode(args.mode, ctx, q, text, cfg, theta or 0.0, args.seed * 1_000_003 + n, target)
        rows.append(ranked_row(qid, hits))
    if args.out:
        write_jsonl(Path(args.out), "retrieved v1", rows)
    else:
        for row in rows:
            print(json.dumps(row, sort_keys=True))
    return EXIT_OK


def cmd_pack(args) -> int:
    from coderag.corpus import load_split
    from coderag.pack import PackConfig, QueryTooLong, pack_context, render_document
    from coderag.pipeline import packed_row, read_jsonl, write_jsonl
    from coderag.tokenize import BpeModel

    bpe = BpeModel.load(args.bpe)
    docs = {r.id: r for r in load_split(args.corpus).all()}
    cfg = PackConfig(window=args.window, mode=args.mode)
    rows, skipped = [], 0
    for ret in read_jsonl(args.retrievals):
        qid = str(ret["query_id"])
        target = docs.get(qid)
        if target is None:
            raise DataError(f"query {qid!r} is not a corpus function; cannot render its signature")
        ids = [d for d, _ in ret["ranked"]]
        unknown = [i for i in ids if i not in docs]
        if unknown:
            raise DataError(f"unknown document ids for {qid!r}: {', '.join(unknown)}")
        try:
            pc = pack_context((target.signature, target.docstring), [(i, render_document(docs[i])) for i in ids],
                              bpe, cfg)
        except QueryTooLong as exc:
            logger.warning("skipping %s: %s", qid, exc)
            skipped += 1
            continue
        rows.append(packed_row(qid, pc, target.body))
    write_jsonl(Path(args.out), "packed v1", rows)
    print(f"packed {len(rows)} contexts, {skipped} skipped (query longer than window)")
    return EXIT_OK


def _function_records(path: Path):
    from coderag.corpus import load_split, read_function_corpus, filter_functions
    if path.is_dir():
        return load_split(path).all()
    return filter_functions(read_function_corpus(path))


def cmd_sofa_build(args) -> int:
    from coderag.corpus import parse_intent_snippets
    from coderag.pipeline import commit
    from coderag.sofa import build_sofa, write_pairs

    with open(args.intents, encoding="utf-8") as fh:
        intents = parse_intent_snippets(fh, top_n=10 ** 9)
    functions = _function_records(Path(args.functions))
    pairs = build_sofa(intents, functions, args.top_n, args.neighbors)
    commit(Path(args.out), lambda p: write_pairs(pairs, p))
    mined = sum(not p.curated for p in pairs)
    print(f"{len(pairs)} pairs ({mined} mined, {len(pairs) - mined} curated candidates)")
    return EXIT_OK


def cmd_sofa_curate(args) -> int:
    from coderag.pipeline import commit
    from coderag.sofa import apply_curation, read_pairs, read_verdicts, write_pairs

    result = apply_curation(read_pairs(args.pairs), read_verdicts(args.verdicts))
    subset = result.curated_subset() if args.curated_only else result.pairs
    commit(Path(args.out), lambda p: write_pairs(subset, p))
    kept = len(result.curated_subset())
    print(f"{kept} curated pairs kept, {result.unknown} verdicts for unknown pairs")
    return EXIT_OK


def cmd_eval_retrieval(args) -> int:
    from coderag.pipeline import read_jsonl, score_retrieval

    # accepts pipeline ranking files and the output of ``retrieve``
    rankings = {r["query_id"]: r["ranking"] if "ranking" in r else [d for d, _ in r["ranked"]]
                for r in read_jsonl(args.rankings)}
    gold = {r["query_id"]: r["doc_id"] for r in read_jsonl(args.gold)}
    missing = sorted(set(rankings) - set(gold))
    if missing:
        raise DataError(f"no gold document for {len(missing)} queries, e.g. {missing[0]!r}")
    mrr_value, ndcg_value = score_retrieval(rankings, gold, args.k)
    print(f"MRR {mrr_value:.6f}\nNDCG@{args.k} {ndcg_value:.6f}\nqueries {len(rankings)}")
    return EXIT_OK


def cmd_eval_generation(args) -> int:
    from coderag.corpus import load_split
    from coderag.pipeline import read_jsonl, score_generation
    from coderag.tokenize import BpeModel

    hyps = {r["query_id"]: r["hypothesis_text"] for r in read_jsonl(args.hyps)}
    refs = {r.id: r.body for r in load_split(args.refs).test if r.id in hyps}
    if not refs:
        raise DataError("no hypothesis matches a test-split function")
    s = score_generation(hyps, refs, BpeModel.load(args.bpe))
    print(f"BLEU-4(BPE) {100 * s.bleu4_bpe:.2f}\nBLEU-4 {100 * s.bleu4_word:.2f}\n"
          f"EDist {s.edit_distance_mean:.4f}\nEDist/len {s.edit_distance_norm:.4f}\nqueries {s.n}")
    return EXIT_OK


def cmd_serve(args) -> int:
    from coderag.service import Snapshot, make_server

    snap = Snapshot.load(args.params, args.idx, args.corpus, args.bpe, search_k=args.search_k)
    server = make_server(snap, args.host, args.port)
    print(f"serving {len(snap.store)} documents on http://{args.host}:{server.server_address[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def cmd_pipeline(args) -> int:
    from coderag.pipeline import PipelineConfig, run_pipeline

    overrides = {"out": args.out, "seed": args.seed, "functions": args.functions, "threads": args.threads}
    cfg = PipelineConfig.from_ini(args.config, overrides)
    sys.stdout.write(cfg.to_ini())
    report = run_pipeline(cfg)
    sys.stdout.write(report.to_table())
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coderag", description="Code retrieval and context packing toolkit.")
    p.add_argument("--threads", type=int, default=None, help="cap on numeric library threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="command", required=True)

    corpus = sub.add_parser("corpus", help="ingest and split a function corpus")
    csub = corpus.add_subparsers(dest="action", required=True)
    ing = csub.add_parser("ingest", help="parse, filter and split")
    ing.add_argument("--functions", required=True, help="line-delimited function records")
    ing.add_argument("--intents", help="intent-snippet records (JSON array or lines)")
    ing.add_argument("--top-n", type=int, default=100_000)
    ing.add_argument("--out", required=True)
    ing.add_argument("--max-tokens", type=int, default=150)
    ing.add_argument("--valid", "--valid-size", dest="valid_size", type=int, default=1000)
    ing.add_argument("--test", "--test-size", dest="test_size", type=int, default=1000)
    ing.add_argument("--seed", type=int, default=0)
    ing.set_defaults(func=cmd_corpus_ingest)

    tok = sub.add_parser("tok", help="BPE tokenizer")
    tsub = tok.add_subparsers(dest="action", required=True)
    tb = tsub.add_parser("train-bpe", help="learn merges from texts (one per line) or training docstrings")
    tb.add_argument("--in", dest="texts", help="text file, one text per line")
    tb.add_argument("--corpus", help="corpus directory; uses training docstrings")
    tb.add_argument("--vocab", "--vocab-size", dest="vocab_size", type=int, default=10_000)
    tb.add_argument("--min-frequency", type=int, default=2)
    tb.add_argument("--out", required=True)
    tb.set_defaults(func=cmd_tok_train_bpe)
    te = tsub.add_parser("encode", help="print token ids for text (or stdin)")
    te.add_argument("--model", "--bpe", dest="model", required=True)
    te.add_argument("--text")
    te.set_defaults(func=cmd_tok_encode)

    tr = sub.add_parser("train", help="train the bi-encoder")
    tr.add_argument("--corpus", required=True)
    tr.add_argument("--out", required=True, help="parameter file; tokenizer files go beside it")
    tr.add_argument("--config", help="INI file with a [train] section")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--d", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--architecture", choices=("fusion", "mean"))
    tr.add_argument("--bpe-vocab", type=int, default=10_000)
    tr.add_argument("--code-vocab", type=int, default=10_000)
    tr.add_argument("--log-every", type=int, default=0)
    tr.set_defaults(func=cmd_train)

    idx = sub.add_parser("index", help="embed functions, build or query the ANN index")
    isub = idx.add_subparsers(dest="action", required=True)
    ie = isub.add_parser("embed", help="write code embeddings for a corpus split")
    ie.add_argument("--params", required=True)
    ie.add_argument("--corpus", required=True)
    ie.add_argument("--split", default="train", choices=("train", "valid", "test", "all"))
    ie.add_argument("--max-code-len", type=int, default=200)
    ie.add_argument("--out", required=True)
    ie.set_defaults(func=cmd_index_embed)
    ib = isub.add_parser("build")
    ib.add_argument("--emb", required=True, help="embedding file")
    ib.add_argument("--trees", type=int, default=1000)
    ib.add_argument("--leaf", type=int, default=64)
    ib.add_argument("--seed", type=int, default=0)
    ib.add_argument("--out", required=True)
    ib.set_defaults(func=cmd_index_build)
    iq = isub.add_parser("query")
    iq.add_argument("--idx", required=True)
    iq.add_argument("--emb-query", help="embedding file of query vectors")
    iq.add_argument("--encode", help="docstring to encode with --params")
    iq.add_argument("--params")
    iq.add_argument("--k", type=int, default=10)
    iq.add_argument("--search-k", type=int, default=10_000)
    iq.set_defaults(func=cmd_index_query)

    rt = sub.add_parser("retrieve", help="retrieve templates for docstring queries")
    rt.add_argument("--idx", required=True)
    rt.add_argument("--params", required=True)
    rt.add_argument("--corpus", required=True)
    rt.add_argument("--queries", help="line-delimited {query_id, docstring}")
    rt.add_argument("--q", help="a single docstring instead of --queries")
    rt.add_argument("--out")
    rt.add_argument("--mode", default="full", choices=MODES)
    rt.add_argument("--k", type=int, default=10)
    rt.add_argument("--candidate-pool", type=int, default=100)
    rt.add_argument("--lambda", dest="lam", type=float, default=0.5)
    rt.add_argument("--threshold", type=float, help="gating score (default: median over training queries)")
    rt.add_argument("--search-k", type=int, default=10_000)
    rt.add_argument("--dedupe", action="store_true", help="drop results identical to the query's own function")
    rt.add_argument("--seed", type=int, default=0)
    rt.set_defaults(func=cmd_retrieve)

    pk = sub.add_parser("pack", help="pack retrieved documents and queries into context windows")
    pk.add_argument("--retrievals", required=True, help="output of retrieve")
    pk.add_argument("--corpus", required=True)
    pk.add_argument("--bpe", required=True)
    pk.add_argument("--window", type=int, default=1024)
    pk.add_argument("--mode", default="full", choices=MODES)
    pk.add_argument("--out", required=True)
    pk.set_defaults(func=cmd_pack)

    so = sub.add_parser("sofa", help="function / intent-snippet alignment")
    ssub = so.add_subparsers(dest="action", required=True)
    sb = ssub.add_parser("build")
    sb.add_argument("--intents", required=True)
    sb.add_argument("--functions", required=True, help="corpus directory or raw function records")
    sb.add_argument("--top-n", type=int, default=10_000)
    sb.add_argument("--neighbors", type=int, default=15)
    sb.add_argument("--out", required=True)
    sb.set_defaults(func=cmd_sofa_build)
    sc = ssub.add_parser("curate")
    sc.add_argument("--pairs", required=True)
    sc.add_argument("--verdicts", required=True)
    sc.add_argument("--out", required=True)
    sc.add_argument("--curated-only", action="store_true", help="write only the kept curated subset")
    sc.set_defaults(func=cmd_sofa_curate)

    ev = sub.add_parser("eval", help="score rankings or generated bodies")
    esub = ev.add_subparsers(dest="action", required=True)
    er = esub.add_parser("retrieval")
    er.add_argument("--rankings", required=True)
    er.add_argument("--gold", required=True)
    er.add_argument("--k", type=int, default=10)
    er.set_defaults(func=cmd_eval_retrieval)
    eg = esub.add_parser("generation")
    eg.add_argument("--hyps", required=True)
    eg.add_argument("--refs", required=True, help="corpus directory; references are test-split bodies")
    eg.add_argument("--bpe", required=True)
    eg.set_defaults(func=cmd_eval_generation)

    sv = sub.add_parser("serve", help="run the HTTP search service")
    sv.add_argument("--params", required=True)
    sv.add_argument("--idx", required=True)
    sv.add_argument("--corpus", required=True)
    sv.add_argument("--bpe", help="defaults to bpe.model next to --params")
    sv.add_argument("--port", type=int, default=8080)
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--search-k", type=int, default=10_000)
    sv.set_defaults(func=cmd_serve)

    pl = sub.add_parser("pipeline", help="ingest through eval in one run")
    pl.add_argument("--config", help="INI file; flags override it")
    pl.add_argument("--out")
    pl.add_argument("--functions")
    pl.add_argument("--seed", type=int)
    pl.set_defaults(func=cmd_pipeline)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limits = None
    if args.threads:
        from threadpoolctl import threadpool_limits
        limits = threadpool_limits(args.threads)
    try:
        return args.func(args)
    except (DataError, FileNotFoundError, IsADirectoryError, PermissionError, ValueError, KeyError) as exc:
        print(f"coderag: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvariantError as exc:
        print(f"coderag: internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:   # noqa: BLE001
        logger.debug("unhandled", exc_info=True)
        print(f"coderag: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    finally:
        if limits is not None:
            limits.unregister()


if __name__ == "__main__":
    sys.exit(main())
