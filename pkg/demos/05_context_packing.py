"""Pack retrieved functions and the query into a fixed token window.

Run: python demos/05_context_packing.py
"""
from coderag.corpus import filter_functions, read_function_corpus
from coderag.pack import PackConfig, pack_context, render_document
from coderag.synthetic import fixture_paths
from coderag.tokenize import train_bpe

records = filter_functions(read_function_corpus(fixture_paths()[0]))
bpe = train_bpe([render_document(r) for r in records], vocab_size=1500)

target, retrieved = records[0], records[1:40]
query = (target.signature, target.docstring)
docs = [(r.id, render_document(r)) for r in retrieved]

# documents go in rank order until the next one would not fit; the query always ends the window
for window in (64, 256, 1024):
    pc = pack_context(query, docs, bpe, PackConfig(window=window))
    print(f"window {window:>4}: {pc.n_retrieved:>2} documents, {len(pc.token_ids):>4} tokens used")

pc = pack_context(query, docs, bpe, PackConfig(window=256))
print("\nprovenance of the 256-token window:")
for span in pc.provenance:
    print(f"  [{span.start:>3}, {span.end:>3})  {span.source}")
print("\npacked text:\n" + pc.text)

baseline = pack_context(query, docs, bpe, PackConfig(window=256, mode="none"))
print(f"\nmode=none keeps only the query: {len(baseline.token_ids)} tokens")
