"""Ingest the bundled function corpus and look at the two tokenizers.

Run: python demos/01_corpus_and_tokenizers.py
"""
from coderag.corpus import Diagnostics, filter_functions, read_function_corpus, split_corpus
from coderag.featurize import code_text
from coderag.synthetic import fixture_paths
from coderag.tokenize import filter_tokens, tokenize_code, train_bpe

functions_path, _ = fixture_paths()
diag = Diagnostics()
records = read_function_corpus(functions_path, diag)
kept = filter_functions(records)
print(f"parsed {len(records)} documented functions, {len(kept)} survive the class-method and length filters")
print("skipped while parsing:", dict(diag.counts))

split = split_corpus(kept, valid_size=20, test_size=30, seed=0)
print(f"split: {len(split.train)} train / {len(split.valid)} valid / {len(split.test)} test")

rec = split.train[0]
print("\nfirst training function:\n" + code_text(rec))
print("\ndocstring:", rec.docstring)

# the length filter counts coarse tokens; the code encoder sees lowercased subtokens
print("\nfilter tokens:", filter_tokens(rec.signature))
print("code subtokens:", tokenize_code(rec.signature))

# docstrings go through a byte-pair encoder trained on the training docstrings
bpe = train_bpe([r.docstring for r in split.train], vocab_size=600)
ids = bpe.encode(rec.docstring)
print(f"\nBPE vocabulary {bpe.vocab_size} ({bpe.base_size} base symbols)")
print("BPE pieces:", [bpe.id_to_token[i] for i in ids])
print("decoded:", bpe.decode(ids))
