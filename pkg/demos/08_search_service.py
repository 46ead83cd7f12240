"""Serve a trained model over HTTP and query it.

Run: python demos/08_search_service.py
"""
import json
import tempfile
import urllib.request
from pathlib import Path
from urllib.parse import urlencode

from coderag.corpus import load_split
from coderag.pipeline import PipelineConfig, run_pipeline
from coderag.service import Snapshot, serve_in_thread

out = Path(tempfile.mkdtemp()) / "run"
run_pipeline(PipelineConfig(out=str(out)))
snapshot = Snapshot.load(out / "model" / "params.fenc", out / "index" / "db.idx", out / "corpus")
server, thread = serve_in_thread(snapshot)
base = f"http://127.0.0.1:{server.server_address[1]}"
print("serving on", base)


def get(path):
    try:
        with urllib.request.urlopen(base + path) as resp:
            return resp.status, resp.read().decode()
    except urllib.error.HTTPError as err:
        return err.code, err.read().decode()


print("/health ->", get("/health"))

target = load_split(out / "corpus").train[3]
status, body = get("/search?" + urlencode({"q": target.docstring, "k": 3}))
print(f"\nsearching for {target.docstring!r} (function {target.id}):")
for hit in json.loads(body)["results"]:
    print(f"  {hit['doc_id']}  score {hit['score']:.3f}")

status, body = get("/search?" + urlencode({"q": target.docstring, "k": 3, "mode": "mmr", "lambda": 0.3}))
print("with MMR, lambda=0.3:", [h["doc_id"] for h in json.loads(body)["results"]])

print("\n/doc/" + target.id + " ->\n" + get("/doc/" + target.id)[1])
print("empty query ->", get("/search?q="))
print("unknown document ->", get("/doc/nope"))

server.shutdown()
