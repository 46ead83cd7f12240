"""Acceptance checks, one test per criterion.

Each test prints ``CRITERION n PASS|FAIL | detail`` and then asserts the
verdict, so a failing criterion fails the run. The same lines are repeated in
an "acceptance criteria" block at the end of the pytest output.

Criterion 7 needs the real CodeSearchNet python corpus: point
``CSN_PYTHON_JSONL`` at a ``.jsonl``/``.jsonl.gz`` file or a directory of them.
Without it the count is reported as NOT RUN and the test is skipped.
"""
import gzip
import json
import math
import os
import shutil
import subprocess
import sys
import time
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from urllib.parse import urlencode

import numpy as np
import pytest

from coderag.corpus import filter_functions, load_split, parse_function_corpus, parse_intent_snippets, split_corpus
from coderag.encoder import encode, fuse, init_pair, pool
from coderag.featurize import Featurizer, code_text, embed_code, embed_queries, unit_rows
from coderag.index import (
    AnnConfig, VectorStore, ann_search, build_forest, exact_search, random_unit_vectors, recall_at_k,
)
from coderag.metrics import RelevanceJudgment, corpus_bleu, mrr, ndcg, sentence_bleu, token_edit_distance
from coderag.pack import SEPARATOR, PackConfig, pack_context, render_query
from coderag.retrieve import MmrConfig, dense_search, mmr_search, mmr_select
from coderag.service import Snapshot, serve_in_thread
from coderag.sofa import (
    DISCARDED, KEPT, FeatureIndex, SofaPair, append_verdicts, apply_curation, brute_force_neighbors, build_sofa,
    featurize, read_verdicts,
)
from coderag.synthetic import generate_functions, generate_intents, public_record
from coderag.tokenize import BpeModel
from coderag.train import TrainConfig, grad_check, make_batch, train_retriever

from conftest import VERDICTS, make_function
from test_metrics import BLEU_ORACLE, CORPUS_BLEU_ORACLE, EDIT_ORACLE

CSN_FILTERED_TARGET = 119_480


def verdict(request, capsys, n, ok, detail):
    line = f"CRITERION {n:>2} {'PASS' if ok else 'FAIL'} | {detail}"
    request.config.stash[VERDICTS].append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


def to_lines(objs):
    return (json.dumps(o) for o in objs)


# -- 1 ------------------------------------------------------------------------

def perturbed_pair(seed, vocab=20, d=6):
    pair = init_pair(vocab, vocab, d, seed=seed)
    rng = np.random.default_rng(seed)
    for p in (pair.query, pair.code):
        p.E[:] = rng.normal(size=p.E.shape) * 0.5
        p.w_h[:] = rng.normal(size=d)
        p.w_fuse[:] = rng.uniform(0.2, 1.0, size=3)
        p.beta[:] = rng.uniform(0.5, 2.0)
    pair.code.A += rng.normal(size=(d, d)) * 0.1
    pair.code.b[:] = rng.normal(size=d) * 0.1
    return pair


def test_criterion_01_gradient_check(request, capsys):
    start = time.perf_counter()
    errors = []
    for seed in range(5):
        rng = np.random.default_rng(seed + 100)
        batch = make_batch([(list(rng.integers(2, 20, rng.integers(1, 6))),
                             list(rng.integers(2, 20, rng.integers(1, 8)))) for _ in range(4)])
        errors.append(grad_check(perturbed_pair(seed), batch))
    elapsed = time.perf_counter() - start
    verdict(request, capsys, 1, max(errors) < 1e-4 and elapsed < 30,
            f"max rel err {max(errors):.2e} over {len(errors)} batches (< 1e-4), {elapsed:.1f}s (< 30s)")


# -- 2 ------------------------------------------------------------------------

def test_criterion_02_encoder_invariants(request, capsys):
    rng = np.random.default_rng(2)
    perm_err = attn_err = lin_err = 0.0
    n_cases = 500
    for _ in range(n_cases):
        d, m, vocab = int(rng.integers(1, 9)), int(rng.integers(1, 12)), 30
        pair = perturbed_pair(int(rng.integers(1 << 30)), vocab, d)
        ids = list(rng.integers(0, vocab, m))
        shuffled = list(rng.permutation(ids))
        for side, p in (("query", pair.query), ("code", pair.code)):
            perm_err = max(perm_err, float(np.max(np.abs(encode(p, ids, side) - encode(p, shuffled, side)))))
        H = rng.normal(size=(d, m))
        attn_err = max(attn_err, float(np.max(np.abs(pool(H, "attn", np.zeros(d)) - pool(H, "mean")))))
        a, b, c, a2, b2, c2 = (rng.normal(size=d) for _ in range(6))
        w, s = rng.normal(size=3), float(rng.uniform(0.1, 3.0))
        lhs = fuse(a + a2, b + b2, c + c2, *w, s)
        rhs = fuse(a, b, c, *w, s) + fuse(a2, b2, c2, *w, s)
        lin_err = max(lin_err, float(np.max(np.abs(lhs - rhs))))
    ok = perm_err <= 1e-9 and attn_err <= 1e-12 and lin_err <= 1e-9
    verdict(request, capsys, 2, ok, f"{n_cases} random cases: permutation {perm_err:.1e} (<= 1e-9), "
                                    f"attn-vs-mean at w_h=0 {attn_err:.1e}, fuse linearity {lin_err:.1e}")


# -- 3, 4 ---------------------------------------------------------------------

DESK_SEEDS = (0, 1, 2)
POOL = 1000


@pytest.fixture(scope="module")
def desk():
    """Synthetic corpus with >= 50k training pairs, fusion and mean-only encoders for three seeds."""
    fns = generate_functions(66_000, seed=7)
    recs = filter_functions(parse_function_corpus(to_lines(public_record(f) for f in fns)))
    split = split_corpus(recs, 1000, 3 * POOL, 0)
    feats = Featurizer.fit(split.train, 10_000, 10_000)
    examples = feats.pairs(split.train)
    qv, cv = feats.bpe.vocab_size, len(feats.code_vocab)

    def pool_mrr(pair):
        Q, _ = unit_rows(embed_queries(pair, feats, [r.docstring for r in split.test]))
        C, _ = unit_rows(embed_code(pair, feats, split.test))
        rr = []
        for s in range(0, len(split.test) - POOL + 1, POOL):
            S = Q[s:s + POOL] @ C[s:s + POOL].T
            rank = 1 + (S > np.diag(S)[:, None]).sum(axis=1)
            rr.extend(1.0 / rank)
        return float(np.mean(rr))

    runs = {}
    for seed in DESK_SEEDS:
        for arch in ("fusion", "mean"):
            cfg = TrainConfig(seed=seed, architecture=arch)
            start = time.perf_counter()
            trained = train_retriever(cfg, examples, qv, cv)
            untrained = init_pair(qv, cv, cfg.d, seed=seed, architecture=arch)
            runs[seed, arch] = {"untrained": pool_mrr(untrained), "trained": pool_mrr(trained.pair),
                                "loss": trained.losses[-1], "seconds": time.perf_counter() - start}
    return len(examples), runs


def test_criterion_03_training_signal(request, capsys, desk):
    n_train, runs = desk
    ratios = [runs[s, "fusion"]["trained"] / runs[s, "fusion"]["untrained"] for s in DESK_SEEDS]
    toy_losses = []
    for seed in range(3):
        cfg = TrainConfig(batch_size=16, lr=0.05, epochs=100, d=32, seed=seed)
        toy_losses.append(train_retriever(cfg, [([i + 2], [i + 2]) for i in range(64)], 66, 66).losses[-1])
    toy_bound = 0.05 * math.log(16)
    ok = n_train >= 50_000 and min(ratios) >= 10 and max(toy_losses) < toy_bound
    detail = "; ".join(f"seed {s}: MRR {runs[s, 'fusion']['untrained']:.4f} -> {runs[s, 'fusion']['trained']:.4f}"
                       for s in DESK_SEEDS)
    verdict(request, capsys, 3, ok, f"{n_train} train pairs, {POOL}-candidate pools; {detail}; "
                                    f"min ratio {min(ratios):.0f}x (>= 10x); toy final loss "
                                    f"{max(toy_losses):.4f} (< {toy_bound:.4f})")


def test_criterion_04_fusion_vs_mean(request, capsys, desk):
    _, runs = desk
    wins = sum(runs[s, "fusion"]["trained"] >= runs[s, "mean"]["trained"] for s in DESK_SEEDS)
    detail = "; ".join(f"seed {s}: fusion {runs[s, 'fusion']['trained']:.4f} vs mean {runs[s, 'mean']['trained']:.4f}"
                       for s in DESK_SEEDS)
    verdict(request, capsys, 4, wins >= 2, f"fusion >= mean in {wins}/3 seeds (need 2); {detail}")


# -- 5 ------------------------------------------------------------------------

def test_criterion_05_ann_fidelity(request, capsys):
    n, d, k = 10_000, 128, 10
    store = VectorStore([f"v{i:05d}" for i in range(n)], random_unit_vectors(n, d, 0))
    queries = random_unit_vectors(100, d, 1)
    X = store.vectors.astype(np.float64)

    def oracle(q):
        dots = X @ q
        order = sorted(range(n), key=lambda i: (-dots[i], store.ids[i]))[:k]
        return [store.ids[i] for i in order]

    exact = [[i for i, _ in exact_search(store, q, k)] for q in queries]
    exact_ok = exact == [oracle(q) for q in queries]

    start = time.perf_counter()
    forest = build_forest(store, AnnConfig(n_trees=50, search_k=2000), seed=0)
    approx = [[i for i, _ in ann_search(forest, store, q, k, 2000)] for q in queries]
    elapsed = time.perf_counter() - start
    recall = recall_at_k(approx, exact, k)

    curve = []
    for sk in (100, 500, 1000, 2000, 5000, 10_000):
        curve.append(recall_at_k([[i for i, _ in ann_search(forest, store, q, k, sk)] for q in queries], exact, k))
    monotone = all(a <= b for a, b in zip(curve, curve[1:]))
    ok = exact_ok and recall >= 0.9 and monotone and elapsed < 60
    verdict(request, capsys, 5, ok, f"exact == brute force: {exact_ok}; recall@10 {recall:.3f} (>= 0.9) at "
                                    f"n_trees=50 search_k=2000; recall by search_k "
                                    f"{[round(r, 3) for r in curve]} monotone: {monotone}; "
                                    f"build+query {elapsed:.1f}s (< 60s)")


# -- 6 ------------------------------------------------------------------------

def test_criterion_06_mmr(request, capsys):
    store = VectorStore([f"d{i:04d}" for i in range(400)], random_unit_vectors(400, 12, 5))
    V = {i: store.vector(i).astype(np.float64) for i in store.ids}

    def spread(ids):
        M = np.stack([V[i] for i in ids])
        S = M @ M.T
        return (S.sum() - np.trace(S)) / (len(ids) * (len(ids) - 1))

    lam_one = all(
        [r.doc_id for r in mmr_search(store, q, MmrConfig(lam=1.0, m=10, candidate_pool=50))]
        == [r.doc_id for r in dense_search(store, q, 10)]
        for q in random_unit_vectors(50, 12, 3))
    sim = np.array([[1.0, 0.95, 0.1], [0.95, 1.0, 0.2], [0.1, 0.2, 1.0]])
    example = mmr_select(["d1", "d2", "d3"], [0.9, 0.85, 0.5], sim, 0.5, 3)
    top_div, mmr_div = [], []
    for q in random_unit_vectors(100, 12, 99):
        top_div.append(spread([r.doc_id for r in dense_search(store, q, 10)]))
        mmr_div.append(spread([r.doc_id for r in mmr_search(store, q, MmrConfig(lam=0.5, m=10, candidate_pool=50))]))
    ok = lam_one and example == ["d1", "d3", "d2"] and np.mean(mmr_div) <= np.mean(top_div)
    verdict(request, capsys, 6, ok, f"lambda=1 == top-m: {lam_one}; example {example}; mean pairwise cosine "
                                    f"MMR {np.mean(mmr_div):.4f} vs top-m {np.mean(top_div):.4f} over 100 queries")


# -- 7 ------------------------------------------------------------------------

def csn_lines(root: Path):
    files = sorted(root.rglob("*.jsonl*")) if root.is_dir() else [root]
    for path in files:
        opener = gzip.open if path.suffix == ".gz" else open
        with opener(path, "rt", encoding="utf-8") as fh:
            yield from fh


def test_criterion_07_corpus_filtering(request, capsys):
    body = "\n".join(["    x"] * 143)
    at = make_function("at", signature="def f():", docstring="Do.", body=body)
    over = make_function("over", signature="def f():", docstring="Do.", body=body + "\n    x")
    method = make_function("m", signature="def m(self):", is_class_method=True)
    parsed = parse_function_corpus(to_lines([
        {"id": "plain", "code": 'def f(x):\n    """Doc."""\n    return x'},
        {"id": "meth", "code": 'def f(self, x):\n    """Doc."""\n    return x'},
        {"url": "u", "func_name": "Cls.f", "code": 'def f(x):\n    """Doc."""\n    return x'},
    ]))
    rules_ok = (at.filter_token_count == 150 and filter_functions([at, over, method]) == [at]
                and [r.id for r in filter_functions(parsed)] == ["plain"])
    source = os.environ.get("CSN_PYTHON_JSONL")
    if not source:
        line = (f"CRITERION  7 NOT RUN | CSN_PYTHON_JSONL unset, filtered count vs {CSN_FILTERED_TARGET} not measured; "
                f"150-token and class-method rules on constructed fixtures: {'PASS' if rules_ok else 'FAIL'}")
        request.config.stash[VERDICTS].append(line)
        with capsys.disabled():
            print("\n" + line)
        assert rules_ok
        pytest.skip("CodeSearchNet corpus not available")
    count = len(filter_functions(parse_function_corpus(csn_lines(Path(source)))))
    within = abs(count - CSN_FILTERED_TARGET) <= 0.05 * CSN_FILTERED_TARGET
    verdict(request, capsys, 7, rules_ok and within,
            f"{count} functions after filtering vs {CSN_FILTERED_TARGET} (+-5%); fixture rules ok: {rules_ok}")


# -- 8 ------------------------------------------------------------------------

def test_criterion_08_sofa(request, capsys, tmp_path):
    fns = generate_functions(5000, seed=11)
    functions = filter_functions(parse_function_corpus(to_lines(public_record(f) for f in fns)))
    intents = parse_intent_snippets("\n".join(to_lines(generate_intents(fns, 12_000, seed=12, p_curated=0.02))),
                                    top_n=100_000)
    pairs = build_sofa(intents, functions, top_n=10_000, neighbors=15)
    mined = sum(not p.curated for p in pairs)

    index = FeatureIndex(functions)
    feats = {f.id: featurize(code_text(f)) for f in functions}
    sample = intents[::60]
    exact = all(index.neighbors(r.snippet, 15) == brute_force_neighbors(r.snippet, functions, 15, feats)
                for r in sample)

    curated = [SofaPair(f"f{i}", f"s{i}", 0.5, curated=True) for i in range(2300)]
    path = tmp_path / "verdicts.tsv"
    append_verdicts(path, [(f"f{i}", f"s{i}", DISCARDED) for i in range(600)])
    append_verdicts(path, [(f"f{i}", f"s{i}", KEPT) for i in range(600, 2300)])
    kept = len(apply_curation(curated, read_verdicts(path)).curated_subset())
    ok = mined <= 150_000 and kept == 1700 and exact
    verdict(request, capsys, 8, ok, f"{mined} mined pairs from {len(intents)} intents x {len(functions)} functions "
                                    f"(<= 150000); curation 2300-600 -> {kept} (== 1700); index == brute force "
                                    f"top-15 on {len(sample)} intents: {exact}")


# -- 9 ------------------------------------------------------------------------

MRR_ORACLE = [
    ({"q1": ["a", "b"], "q2": ["c"]}, {"q1": "a", "q2": "c"}, 1.0),
    ({"q": ["w", "x", "y", "z"]}, {"q": "z"}, 0.25),
    ({"q": ["w", "x"]}, {"q": "z"}, 0.0),
    ({"q1": ["a", "b"], "q2": ["b", "a"]}, {"q1": "b", "q2": "b"}, 0.75),
    ({"q": ["a", "b", "c"]}, {"q": "c"}, 1 / 3),
]
# linear gain over log2(rank + 1), ideal DCG from the judged gains, computed by hand
NDCG_ORACLE = [
    (["a", "b", "c"], [("a", 1)], 3, 1.0),
    (["x", "y", "a"], [("a", 1)], 3, 0.5),
    (["x", "y", "a"], [("a", 1)], 2, 0.0),
    (["a", "x", "b"], [("a", 1), ("b", 1)], 3, (1 + 0.5) / (1 + 1 / math.log2(3))),
    (["d2", "d1"], [("d1", 2), ("d2", 1)], 2, (1 + 2 / math.log2(3)) / (2 + 1 / math.log2(3))),
]


def test_criterion_09_metric_oracles(request, capsys):
    bleu_err = max(abs(sentence_bleu(h.split(), r.split()) - e) for h, r, e in BLEU_ORACLE)
    bleu_err = max(bleu_err, abs(corpus_bleu([h.split() for h, _, _ in BLEU_ORACLE],
                                             [r.split() for _, r, _ in BLEU_ORACLE]) - CORPUS_BLEU_ORACLE))
    mrr_ok = all(mrr(r, g) == e for r, g, e in MRR_ORACLE)
    ndcg_ok = all(ndcg(r, [RelevanceJudgment("q", dd, gg) for dd, gg in j], k) == e
                  for r, j, k, e in NDCG_ORACLE)
    edit_ok = all(token_edit_distance(list(a), list(b))[0] == e for a, b, e in EDIT_ORACLE)
    ok = bleu_err <= 1e-6 and mrr_ok and ndcg_ok and edit_ok
    verdict(request, capsys, 9, ok, f"BLEU max |err| {bleu_err:.1e} on {len(BLEU_ORACLE)}+1 cases (<= 1e-6); "
                                    f"MRR {len(MRR_ORACLE)} exact: {mrr_ok}; NDCG {len(NDCG_ORACLE)}: {ndcg_ok}; "
                                    f"edit distance {len(EDIT_ORACLE)} exact: {edit_ok}")


# -- 10 -----------------------------------------------------------------------

def test_criterion_10_packer(request, capsys, fixture_run):
    out, _ = fixture_run
    lengths = []
    for path in sorted((out / "pack").glob("*.jsonl")):
        lengths += [len(json.loads(line)["token_ids"]) for line in path.read_text().splitlines()[1:]]
    bpe = BpeModel.load(out / "model" / "bpe.model")
    queries = [json.loads(line) for line in (out / "eval" / "queries.jsonl").read_text().splitlines()[1:]]
    records = {r.id: r for r in load_split(out / "corpus").all()}
    docs = [(i, code_text(records[i])) for i in sorted(records)[:20]]
    none_ok = True
    for q in queries:
        query = (records[q["query_id"]].signature, q["docstring"])
        pc = pack_context(query, docs, bpe, PackConfig(window=1024, mode="none"))
        none_ok &= pc.n_retrieved == 0 and pc.token_ids == bpe.encode(render_query(*query))

    char_bpe = BpeModel("abcdefghijklmnopqrstuvwxyz0123456789():#-\"._+=,", [])
    equal = [(f"d{i:02d}", f"d{i:02d} x") for i in range(20)]
    q = ("def f():", "Do.")
    q_len = len(char_bpe.encode(render_query(*q)))
    doc_len = len(char_bpe.encode(equal[0][1] + SEPARATOR))
    counts = [pack_context(q, equal, char_bpe, PackConfig(window=w)).n_retrieved for w in range(q_len, q_len + 300)]
    monotone = all(a <= b for a, b in zip(counts, counts[1:]))
    exact_fill = all(c == (w - q_len) // doc_len for c, w in zip(counts, range(q_len, q_len + 300)) if c < 20)
    ok = lengths and max(lengths) <= 1024 and none_ok and monotone and exact_fill
    verdict(request, capsys, 10, ok, f"max packed length {max(lengths)} over {len(lengths)} examples (<= 1024); "
                                     f"mode=none == query only: {none_ok}; n_retrieved monotone over "
                                     f"{len(counts)} windows: {monotone}, floor((W - |q|) / {doc_len}): {exact_fill}")


# -- 11 -----------------------------------------------------------------------

def test_criterion_11_end_to_end(request, capsys, tmp_path):
    out = tmp_path / "run"
    digests, times = [], []
    for hash_seed in (0, 4242):
        if out.exists():
            shutil.rmtree(out)
        start = time.perf_counter()
        res = subprocess.run([sys.executable, "-m", "coderag.cli", "pipeline", "--out", str(out)],
                             env={**os.environ, "PYTHONHASHSEED": str(hash_seed)}, capture_output=True, timeout=900)
        times.append(time.perf_counter() - start)
        assert res.returncode == 0, res.stderr.decode()
        digests.append({str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    identical = digests[0] == digests[1]
    ok = identical and max(times) < 300
    verdict(request, capsys, 11, ok, f"two runs: {len(digests[0])} files byte-identical: {identical}; "
                                     f"wall time {max(times):.1f}s (< 300s)")


# -- 12 -----------------------------------------------------------------------

def test_criterion_12_service(request, capsys, fixture_run):
    out, _ = fixture_run
    snap = Snapshot.load(out / "model" / "params.fenc", out / "index" / "db.idx", out / "corpus")
    server, thread = serve_in_thread(snap)
    base = f"http://127.0.0.1:{server.server_address[1]}"

    def get(path):
        with urllib.request.urlopen(base + path, timeout=30) as resp:
            return resp.status, resp.read()

    try:
        health = get("/health")
        target = load_split(out / "corpus").train[0]
        status, body = get("/search?" + urlencode({"q": target.docstring, "k": 10}))
        top = json.loads(body)["results"][0]["doc_id"]
        url = "/search?" + urlencode({"q": "load the configuration from a file", "k": 10})
        with ThreadPoolExecutor(max_workers=32) as ex:
            answers = list(ex.map(lambda _: json.loads(get(url)[1])["results"], range(100)))
        same = all([(r["doc_id"], r["score"]) for r in a] == [(r["doc_id"], r["score"]) for r in answers[0]]
                   for a in answers)
    finally:
        server.shutdown()
        server.server_close()
        thread.join(5)
    ok = health == (200, b"ok") and status == 200 and top == target.id and same
    verdict(request, capsys, 12, ok, f"/health {health[0]} {health[1]!r}; exact-docstring query for {target.id} "
                                     f"ranks {top} first; 100 concurrent identical requests agree: {same}")
