"""Run the whole pipeline on the bundled fixture and read the evaluation report.

Run: python demos/07_pipeline_and_eval.py
"""
import tempfile
from pathlib import Path

from coderag.metrics import RelevanceJudgment, ndcg, sentence_bleu, token_edit_distance
from coderag.pipeline import PipelineConfig, run_pipeline

out = Path(tempfile.mkdtemp()) / "run"
report = run_pipeline(PipelineConfig(out=str(out)))
print(report.to_table())

# generated bodies are stand-ins here: each mode copies the body of its best retrieved function,
# so BLEU measures how useful the retrieved context would be to a copy-paste generator
print("artifacts:", sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file())[:8], "...")

print("\nthe metrics on their own:")
print("  NDCG@3, single relevant doc at rank 3:", ndcg(["x", "y", "a"], [RelevanceJudgment("q", "a", 1)], 3))
print("  BLEU-4:", round(sentence_bleu("return x + 1".split(), "return x + 2".split()), 4))
print("  edit distance:", token_edit_distance("return x + 1".split(), "return y".split()))
