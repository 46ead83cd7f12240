"""Function and intent-snippet corpora: parsing, filtering and splitting."""
from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

from coderag.errors import DataError
from coderag.tokenize import filter_tokens

logger = logging.getLogger(__name__)

TRAIN, VALID, TEST = "train", "valid", "test"

_DEF_LINE = re.compile(r"^(\s*)(?:async\s+)?def\s+\w+")
_STRING_START = re.compile(r"^(?P<prefix>[rRuUbBfF]{0,2})(?P<quote>\"\"\"|'''|\"|')")
_RECEIVERS = ("self", "cls")


@dataclass(frozen=True)
class FunctionRecord:
    id: str
    repo: str
    path: str
    name: str
    signature: str
    docstring: str
    body: str
    split: str = TRAIN
    is_class_method: bool = False
    filter_token_count: int = 0

    def full_text(self) -> str:
        return "\n".join((self.signature, self.docstring, self.body))


@dataclass(frozen=True)
class IntentSnippetRecord:
    id: str
    intent: str
    snippet: str
    confidence: float
    curated: bool
    question_id: int


@dataclass
class CorpusSplit:
    train: list[FunctionRecord]
    valid: list[FunctionRecord]
    test: list[FunctionRecord]
    seed: int

    def all(self) -> list[FunctionRecord]:
        return [*self.train, *self.valid, *self.test]


@dataclass
class Diagnostics:
    """Per-stream tallies of skipped input."""

    counts: Counter = field(default_factory=Counter)

    def skip(self, reason: str, where: str = "") -> None:
        self.counts[reason] += 1
        logger.debug("skipped %s: %s", where, reason)

    @property
    def skipped(self) -> int:
        return sum(self.counts.values())


# -- splitting a function's source into signature / docstring / body ---------

def _header_end(lines: list[str], start: int) -> tuple[int, int]:
    """(line, column) just past the colon that closes the def header."""
    depth = 0
    quote = None
    for ln in range(start, len(lines)):
        line = lines[ln]
        col = 0
        while col < len(line):
            ch = line[col]
            if quote:
                if ch == "\\":
                    col += 2
                    continue
                if line.startswith(quote, col):
                    col += len(quote)
                    quote = None
                    continue
            elif ch == "#":
                break
            elif line.startswith(('"""', "'''"), col):
                quote = line[col:col + 3]
                col += 3
                continue
            elif ch in "\"'":
                quote = ch
            elif ch in "([{":
                depth += 1
            elif ch in ")]}":
                depth -= 1
            elif ch == ":" and depth == 0:
                return ln, col + 1
            col += 1
    raise DataError("unterminated function header")


def _read_string(text: str) -> tuple[str, int] | None:
    """If text starts with a string literal, return (contents, end offset)."""
    m = _STRING_START.match(text)
    if not m:
        return None
    quote = m.group("quote")
    pos = m.end()
    while pos < len(text):
        if text[pos] == "\\":
            pos += 2
            continue
        if text.startswith(quote, pos):
            return text[m.end():pos], pos + len(quote)
        if len(quote) == 1 and text[pos] == "\n":
            return None
        pos += 1
    return None


def _clean_docstring(raw: str) -> str:
    lines = raw.expandtabs().splitlines()
    if not lines:
        return ""
    indent = min((len(l) - len(l.lstrip()) for l in lines[1:] if l.strip()), default=0)
    out = [lines[0].strip()] + [l[indent:].rstrip() for l in lines[1:]]
    while out and not out[-1]:
        out.pop()
    while out and not out[0]:
        out.pop(0)
    return "\n".join(out)


@dataclass(frozen=True)
class SplitFunction:
    signature: str
    docstring: str
    body: str
    indented: bool
    first_param: str | None


def split_function(code: str) -> SplitFunction:
    """Separate a function's source into signature, docstring and body.

    Works on text rather than an AST so that Python 2 sources parse too.
    Raises DataError when there is no def line or the header never closes.
    """
    lines = code.replace("\r\n", "\n").split("\n")
    start = next((i for i, l in enumerate(lines) if _DEF_LINE.match(l)), None)
    if start is None:
        raise DataError("no def line")
    end_line, end_col = _header_end(lines, start)
    signature = "\n".join(lines[start:end_line] + [lines[end_line][:end_col]])
    rest = "\n".join([lines[end_line][end_col:]] + lines[end_line + 1:])
    stripped = rest.lstrip()
    lit = _read_string(stripped)
    docstring, body = "", rest
    if lit is not None:
        docstring = _clean_docstring(lit[0])
        body = stripped[lit[1]:]
    # drop the blank remainder of the line that closed the header or docstring
    first_nl = body.find("\n")
    if first_nl >= 0 and not body[:first_nl].strip():
        body = body[first_nl + 1:]
    elif first_nl < 0 and not body.strip():
        body = ""
    body = body.rstrip()
    params = signature[signature.find("(") + 1:]
    first = re.match(r"\s*\*{0,2}(\w+)", params)
    return SplitFunction(
        signature=signature.rstrip(),
        docstring=docstring,
        body=body,
        indented=bool(_DEF_LINE.match(lines[start]).group(1)),
        first_param=first.group(1) if first else None,
    )


def is_class_method(parts: SplitFunction, in_class: bool | None = None) -> bool:
    if in_class is not None:
        return bool(in_class)
    return parts.indented or parts.first_param in _RECEIVERS


def make_record(obj: dict, split: str = TRAIN) -> FunctionRecord:
    parts = split_function(obj["code"])
    in_class = obj.get("in_class")
    if in_class is None and "." in str(obj.get("func_name", "")):
        in_class = True      # CodeSearchNet qualifies methods as Class.method
    rec = FunctionRecord(
        id=str(obj["id"]) if "id" in obj else str(obj["url"]),
        repo=str(obj.get("repo", "")),
        path=str(obj.get("path", "")),
        name=str(obj.get("name", obj.get("func_name", ""))),
        signature=parts.signature,
        docstring=parts.docstring,
        body=parts.body,
        split=split,
        is_class_method=is_class_method(parts, in_class),
    )
    return replace(rec, filter_token_count=len(filter_tokens(rec.full_text())))


def parse_function_corpus(source: Iterable[str], diagnostics: Diagnostics | None = None
                          ) -> list[FunctionRecord]:
    """One FunctionRecord per well-formed, documented JSON line.

    Malformed lines and undocumented functions are tallied in ``diagnostics``.
    """
    diag = diagnostics if diagnostics is not None else Diagnostics()
    out = []
    for lineno, line in enumerate(source, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            # CodeSearchNet lines carry ``url`` and ``func_name`` instead of ``id`` and ``name``
            if not isinstance(obj, dict) or "code" not in obj or not ("id" in obj or "url" in obj):
                raise DataError("missing id or code field")
            rec = make_record(obj)
        except (ValueError, KeyError, TypeError) as exc:
            diag.skip("malformed", f"line {lineno}: {exc}")
            continue
        if not rec.docstring.strip():
            diag.skip("no_docstring", f"line {lineno}")
            continue
        out.append(rec)
    return out


def read_function_corpus(path: str | Path, diagnostics: Diagnostics | None = None) -> list[FunctionRecord]:
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        return parse_function_corpus(fh, diagnostics)


def filter_functions(records: Iterable[FunctionRecord], max_tokens: int = 150) -> list[FunctionRecord]:
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    return [r for r in records if not r.is_class_method and r.filter_token_count <= max_tokens]


# -- deterministic splitting -------------------------------------------------

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """The splitmix64 generator; small, portable and fully specified."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection sampling."""
        limit = _MASK64 - (_MASK64 + 1) % n
        while True:
            x = self.next()
            if x <= limit:
                return x % n


def shuffled(items: Sequence, seed: int) -> list:
    """Fisher-Yates shuffle driven by SplitMix64(seed)."""
    out = list(items)
    rng = SplitMix64(seed)
    for i in range(len(out) - 1, 0, -1):
        j = rng.below(i + 1)
        out[i], out[j] = out[j], out[i]
    return out


def split_corpus(records: Sequence[FunctionRecord], valid_size: int, test_size: int, seed: int) -> CorpusSplit:
    """Shuffle (records sorted by id, so input order does not matter) and carve off valid/test."""
    n = len(records)
    if valid_size < 0 or test_size < 0 or valid_size + test_size >= n:
        raise DataError(f"cannot take valid={valid_size} + test={test_size} from {n} records")
    ids = [r.id for r in records]
    if len(set(ids)) != n:
        raise DataError("record ids are not unique")
    order = shuffled(sorted(records, key=lambda r: r.id), seed)
    n_train = n - valid_size - test_size
    return CorpusSplit(
        train=[replace(r, split=TRAIN) for r in order[:n_train]],
        valid=[replace(r, split=VALID) for r in order[n_train:n_train + valid_size]],
        test=[replace(r, split=TEST) for r in order[n_train + valid_size:]],
        seed=seed,
    )


# -- intent-snippet pairs ----------------------------------------------------

def _intent_objects(text: str) -> Iterator[dict]:
    stripped = text.lstrip()
    if stripped.startswith("["):
        yield from json.loads(stripped)
        return
    for line in text.splitlines():
        if line.strip():
            try:
                yield json.loads(line)
            except json.JSONDecodeError:
                yield {"__malformed__": line}


def parse_intent_snippets(source: str | IO[str], top_n: int = 100_000,
                          diagnostics: Diagnostics | None = None) -> list[IntentSnippetRecord]:
    """Curated pairs first (all kept), then the top_n mined pairs by confidence.

    Mined ties are broken by question_id ascending. Curated records without a
    confidence get 1.0.
    """
    diag = diagnostics if diagnostics is not None else Diagnostics()
    text = source if isinstance(source, str) else source.read()
    curated, mined = [], []
    for n, obj in enumerate(_intent_objects(text)):
        if not isinstance(obj, dict) or "__malformed__" in obj:
            diag.skip("malformed", f"record {n}")
            continue
        intent = (obj.get("intent") or "").strip()
        snippet = (obj.get("snippet") or "").strip("\n")
        if not intent or not snippet.strip():
            diag.skip("missing_field", f"record {n}")
            continue
        is_curated = bool(obj.get("curated", False))
        prob = obj.get("prob")
        if prob is None and not is_curated:
            diag.skip("missing_confidence", f"record {n}")
            continue
        try:
            qid = int(obj.get("question_id", 0))
            conf = 1.0 if prob is None else float(prob)
        except (TypeError, ValueError):
            diag.skip("malformed", f"record {n}")
            continue
        rec_id = str(obj.get("id") or f"{'c' if is_curated else 'm'}{qid}-{n}")
        rec = IntentSnippetRecord(id=rec_id, intent=intent, snippet=snippet,
                                  confidence=min(max(conf, 0.0), 1.0),
                                  curated=is_curated, question_id=qid)
        (curated if is_curated else mined).append(rec)
    mined.sort(key=lambda r: (-r.confidence, r.question_id))
    return curated + mined[:top_n]


# -- persistence -------------------------------------------------------------

RECORDS_FORMAT = "records v1"


def write_records(records: Iterable, path: str | Path) -> None:
    """JSON lines after a ``{"format": "records v1"}`` header line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"format": RECORDS_FORMAT}) + "\n")
        for rec in records:
            fh.write(json.dumps(asdict(rec), ensure_ascii=False, sort_keys=True) + "\n")


def _record_objects(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh):
            if not line.strip():
                continue
            obj = json.loads(line)
            if n == 0 and "format" in obj:
                if obj["format"] != RECORDS_FORMAT:
                    raise DataError(f"{path}: unsupported format {obj['format']!r}")
                continue
            yield obj


def read_function_records(path: str | Path) -> list[FunctionRecord]:
    return [FunctionRecord(**obj) for obj in _record_objects(path)]


def read_intent_records(path: str | Path) -> list[IntentSnippetRecord]:
    return [IntentSnippetRecord(**obj) for obj in _record_objects(path)]


def save_split(split: CorpusSplit, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in (TRAIN, VALID, TEST):
        write_records(getattr(split, name), out / f"{name}.jsonl")


def load_split(corpus_dir: str | Path, seed: int = 0) -> CorpusSplit:
    d = Path(corpus_dir)
    parts = {}
    for name in (TRAIN, VALID, TEST):
        p = d / f"{name}.jsonl"
        parts[name] = read_function_records(p) if p.exists() else []
    return CorpusSplit(seed=seed, **parts)
