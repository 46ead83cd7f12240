"""Align Stack Overflow style intent/snippet pairs with corpus functions.

Run: python demos/06_sofa_alignment.py
"""
import tempfile
from pathlib import Path

from coderag.corpus import filter_functions, parse_intent_snippets, read_function_corpus
from coderag.featurize import code_text
from coderag.sofa import (
    DISCARDED, KEPT, aroma_similarity, append_verdicts, apply_curation, build_sofa, featurize, read_verdicts,
)
from coderag.synthetic import fixture_paths

functions_path, intents_path = fixture_paths()
functions = filter_functions(read_function_corpus(functions_path))
with open(intents_path, encoding="utf-8") as fh:
    intents = parse_intent_snippets(fh, top_n=10_000)

snippet = intents[0].snippet
print("snippet:\n" + snippet)
print("\nfeatures:", sorted(featurize(snippet)))

# containment: the share of the snippet's features that a function's signature and body also have
fid = build_sofa(intents[:1], functions, neighbors=1)[0].function_id
best = next(f for f in functions if f.id == fid)
print(f"\nbest match {fid}, similarity {aroma_similarity(featurize(snippet), featurize(code_text(best))):.3f}")

pairs = build_sofa(intents, functions, top_n=50, neighbors=15)
mined = [p for p in pairs if not p.curated]
review = [p for p in pairs if p.curated]
print(f"\n{len(mined)} mined pairs from the 50 most confident intents; {len(review)} curated candidates to review")

# a reviewer's verdicts are appended to a TSV; later lines win
verdicts = Path(tempfile.mkdtemp()) / "verdicts.tsv"
append_verdicts(verdicts, [(p.function_id, p.intent_snippet_id, KEPT if p.similarity >= 0.8 else DISCARDED)
                           for p in review])
result = apply_curation(pairs, read_verdicts(verdicts))
print(f"after review: {len(result.curated_subset())} of {len(review)} curated pairs kept")
