"""Deterministic synthetic corpora shaped like CodeSearchNet / CoNaLa records.

Functions are generated from a small grammar of verbs, modifiers and nouns so
that docstrings and code share concepts but not surface tokens (docstrings
use English phrasing, code uses abbreviated identifiers). A fraction of
records are class methods, over-long functions, or undocumented, so the
filtering rules have something to do.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterator

import numpy as np

VERBS = {
    "get": ["Return", "Retrieve", "Get"],
    "compute": ["Compute", "Calculate", "Work out"],
    "load": ["Load", "Read in", "Deserialize"],
    "save": ["Save", "Persist", "Write out"],
    "parse": ["Parse", "Decode the text of", "Interpret"],
    "validate": ["Validate", "Check that", "Verify"],
    "convert": ["Convert", "Transform", "Turn"],
    "find": ["Find", "Search for", "Locate"],
    "filter": ["Filter", "Select", "Keep only"],
    "sort": ["Sort", "Order", "Arrange"],
    "merge": ["Merge", "Combine", "Join together"],
    "count": ["Count", "Tally", "Return the number of"],
    "update": ["Update", "Refresh", "Modify"],
    "delete": ["Delete", "Remove", "Drop"],
    "create": ["Create", "Make", "Construct"],
    "format": ["Format", "Render", "Pretty-print"],
    "send": ["Send", "Dispatch", "Transmit"],
    "fetch": ["Fetch", "Download", "Pull"],
    "normalize": ["Normalize", "Standardize", "Rescale"],
    "split": ["Split", "Break up", "Partition"],
    "encode": ["Encode", "Serialize", "Pack"],
    "reset": ["Reset", "Clear", "Reinitialize"],
    "group": ["Group", "Bucket", "Cluster"],
    "map": ["Map", "Apply a function over", "Transform each of"],
}

# identifier form -> English forms
NOUNS = {
    "usr": ["user", "account holder"], "file": ["file", "document on disk"],
    "path": ["path", "filesystem location"], "cfg": ["config", "configuration"],
    "rec": ["record", "row"], "item": ["item", "element"], "lst": ["list", "sequence"],
    "dict": ["dictionary", "mapping"], "str": ["string", "text"], "num": ["number", "integer"],
    "mat": ["matrix", "2d array"], "vec": ["vector", "array"], "tok": ["token", "word piece"],
    "img": ["image", "picture"], "req": ["request", "http request"], "resp": ["response", "reply"],
    "url": ["url", "web address"], "date": ["date", "calendar day"], "ts": ["timestamp", "time"],
    "price": ["price", "cost"], "order": ["order", "purchase"], "acct": ["account", "profile"],
    "msg": ["message", "notification"], "key": ["key", "lookup key"], "val": ["value", "entry value"],
    "node": ["node", "vertex"], "tree": ["tree", "hierarchy"], "graph": ["graph", "network"],
    "edge": ["edge", "link"], "tbl": ["table", "dataframe"], "col": ["column", "field"],
    "idx": ["index", "position"], "pkt": ["packet", "frame"], "sess": ["session", "connection"],
    "db": ["database", "datastore"], "qry": ["query", "search"], "tmpl": ["template", "layout"],
    "img_px": ["pixel", "image pixel"], "dir": ["directory", "folder"], "env": ["environment", "env vars"],
    "arg": ["argument", "parameter"], "opt": ["option", "flag"], "ctx": ["context", "state"],
    "evt": ["event", "signal"], "job": ["job", "task"], "wkr": ["worker", "thread"],
    "blob": ["blob", "binary payload"], "hdr": ["header", "http header"], "cookie": ["cookie", "browser cookie"],
    "tag": ["tag", "label"], "ver": ["version", "release"], "pkg": ["package", "module"],
    "log": ["log", "log entry"], "err": ["error", "exception"], "cache": ["cache", "memo table"],
    "grid": ["grid", "lattice"], "pt": ["point", "coordinate"], "poly": ["polygon", "shape"],
}

MODIFIERS = {
    "": [""], "active": ["active", "live"], "first": ["first", "leading"], "last": ["last", "final"],
    "max": ["largest", "maximum"], "min": ["smallest", "minimum"], "uniq": ["unique", "distinct"],
    "sorted": ["sorted", "ordered"], "valid": ["valid", "well-formed"], "empty": ["empty", "blank"],
    "new": ["new", "fresh"], "old": ["old", "stale"], "raw": ["raw", "unprocessed"],
    "tmp": ["temporary", "scratch"], "dflt": ["default", "fallback"], "nested": ["nested", "inner"],
}

PREPOSITIONS = ["from the", "for the", "in the", "of the", "using the", "with the"]
FILLER = ["Optionally", "This helper", "Note that it", "It also", "Internally it"]
BODY_LINES = [
    "if {a} is None:\n        return {b}",
    "for {x} in {a}:\n        {b}.append({x})",
    "{x} = {a}.get({k}, {b})",
    "{b} = [{x} for {x} in {a} if {x}]",
    "{x} = len({a})",
    "{b} = sorted({a}, key=lambda {x}: {x}.{n})",
    "{b}.update({a})",
    "{x} = {b}[{k}] if {k} in {b} else None",
    "with open({a}) as fh:\n        {b} = fh.read()",
    "{x} = {a}.split({k})",
    "{b} = dict(zip({a}, {x}))",
    "{x} = max({a}, default={b})",
    "try:\n        {x} = int({a})\n    except ValueError:\n        {x} = {b}",
    "{b} = {a}.strip().lower()",
    "{x} = sum({a}) / max(len({a}), 1)",
]


def _pick(rng: np.random.Generator, seq):
    return seq[int(rng.integers(len(seq)))]


def _concept(rng: np.random.Generator):
    verb = _pick(rng, list(VERBS))
    mod = _pick(rng, list(MODIFIERS))
    noun = _pick(rng, list(NOUNS))
    noun2 = _pick(rng, [n for n in NOUNS if n != noun])
    return verb, mod, noun, noun2


def _identifier(parts: list[str], camel: bool) -> str:
    parts = [p for p in parts if p]
    if camel:
        return parts[0] + "".join(p[:1].upper() + p[1:] for p in parts[1:])
    return "_".join(parts)


def _docstring(rng, verb, mod, noun, noun2, param_names) -> str:
    phrase = _pick(rng, VERBS[verb])
    adj = _pick(rng, MODIFIERS[mod])
    head = f"{phrase} the {adj + ' ' if adj else ''}{_pick(rng, NOUNS[noun])} " \
           f"{_pick(rng, PREPOSITIONS)} {_pick(rng, NOUNS[noun2])}."
    lines = [head]
    if rng.random() < 0.5:
        lines.append("")
        lines.append(f"{_pick(rng, FILLER)} handles a missing {_pick(rng, NOUNS[noun2])}.")
    if rng.random() < 0.4:
        lines.append("")
        lines.append("Args:")
        for p in param_names:
            lines.append(f"    {p}: the {_pick(rng, NOUNS[noun2])} to use.")
    return "\n".join(lines)


def _body(rng, names: list[str], n_lines: int, var: str) -> list[str]:
    out = []
    for _ in range(n_lines):
        tmpl = _pick(rng, BODY_LINES)
        a, b = _pick(rng, names), _pick(rng, names)
        key = _pick(rng, names)
        out.append("    " + tmpl.format(a=a, b=b, x=var, k=repr(key), n=key))
    out.append(f"    return {_pick(rng, names)}")
    return out


def make_function(rng: np.random.Generator, idx: int, *, class_method: bool = False, long: bool = False,
                  documented: bool = True) -> dict:
    verb, mod, noun, noun2 = _concept(rng)
    camel = rng.random() < 0.3
    name = _identifier([verb, mod, noun], camel)
    params = [_identifier([noun2], camel), _identifier([mod, noun], camel) or noun]
    params = list(dict.fromkeys(params))[: 1 + int(rng.integers(2))]
    local = _identifier([noun, "out"], camel)
    var = _identifier([noun2[:3], "x"], camel)
    names = params + [local]
    lines = []
    indent = ""
    if class_method:
        lines.append(f"def {name}(self, {', '.join(params)}):")
    else:
        lines.append(f"def {name}({', '.join(params)}):")
    if documented:
        doc = _docstring(rng, verb, mod, noun, noun2, params).replace("\n", "\n    ")
        doc = "\n".join(l.rstrip() for l in doc.split("\n"))
        lines.append(f'    """{doc}\n    """' if "\n" in doc else f'    """{doc}"""')
    body = [f"    {local} = {'[]' if rng.random() < 0.5 else '{}'}"]
    body.extend(_body(rng, names, 30 if long else int(rng.integers(2, 6)), var))
    lines.extend(body)
    code = "\n".join(indent + l for l in lines)
    return {
        "id": f"fn{idx:06d}",
        "repo": f"synth/{noun}-{verb}",
        "path": f"{noun}/{verb}.py",
        "name": name,
        "code": code,
        "docstring": "",
        "concept": [verb, mod, noun, noun2],
        "body_lines": body,
    }


def generate_functions(n: int, seed: int = 0, *, p_class: float = 0.08, p_long: float = 0.05,
                       p_undocumented: float = 0.04) -> list[dict]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        r = rng.random()
        out.append(make_function(
            rng, i,
            class_method=r < p_class,
            long=p_class <= r < p_class + p_long,
            documented=not (p_class + p_long <= r < p_class + p_long + p_undocumented),
        ))
    return out


def _snippet_for(rng, fn: dict) -> str:
    """One or two consecutive body statements of ``fn``, dedented."""
    body = fn["body_lines"][:-1] or fn["body_lines"]
    start = int(rng.integers(len(body)))
    span = 1 + int(rng.integers(2))
    return "\n".join(l[4:] for l in body[start:start + span])


def generate_intents(functions: list[dict], n: int, seed: int = 0, *, p_curated: float = 0.0) -> list[dict]:
    """Intent/snippet pairs whose snippets are fragments of (some of) ``functions``."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        fn = functions[int(rng.integers(len(functions)))]
        verb, mod, noun, noun2 = fn["concept"]
        intent = f"how to {_pick(rng, VERBS[verb]).lower()} a {_pick(rng, NOUNS[noun])} " \
                 f"{_pick(rng, PREPOSITIONS)} {_pick(rng, NOUNS[noun2])} in python"
        rec = {"question_id": 100000 + i, "intent": intent, "snippet": _snippet_for(rng, fn)}
        if rng.random() < p_curated:
            rec["curated"] = True
        else:
            rec["prob"] = round(float(rng.random()), 6)
        out.append(rec)
    return out


def public_record(fn: dict) -> dict:
    """Drop generator bookkeeping, leaving the corpus line fields."""
    return {k: v for k, v in fn.items() if k not in ("concept", "body_lines")}


def write_jsonl(objs, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for o in objs:
            fh.write(json.dumps(o, sort_keys=True) + "\n")


def write_fixture(out_dir: str | Path, n_functions: int = 200, n_intents: int = 120, seed: int = 0) -> None:
    """The bundled fixture: ``functions.jsonl`` and ``intents.jsonl``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fns = generate_functions(n_functions, seed)
    write_jsonl((public_record(f) for f in fns), out / "functions.jsonl")
    write_jsonl(generate_intents(fns, n_intents, seed + 1, p_curated=0.2), out / "intents.jsonl")


FIXTURE_DIR = Path(__file__).with_name("data")


def fixture_paths() -> tuple[Path, Path]:
    return FIXTURE_DIR / "functions.jsonl", FIXTURE_DIR / "intents.jsonl"
