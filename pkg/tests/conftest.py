import json

import numpy as np
import pytest

from coderag.corpus import FunctionRecord, filter_functions, read_function_corpus
from coderag.pipeline import PipelineConfig, run_pipeline
from coderag.synthetic import fixture_paths


def make_function(fid, signature="def f(x):", docstring="Do it.", body="    return x", **kw):
    from coderag.tokenize import filter_tokens
    rec = FunctionRecord(id=fid, repo="r", path="p.py", name=fid, signature=signature,
                         docstring=docstring, body=body, **kw)
    return FunctionRecord(**{**rec.__dict__, "filter_token_count": len(filter_tokens(rec.full_text()))})


def code_line(fid, code, **extra):
    return json.dumps({"id": fid, "repo": "r", "path": "p.py", "name": fid, "code": code,
                       "docstring": "", **extra})


@pytest.fixture(scope="session")
def fixture_functions():
    return filter_functions(read_function_corpus(fixture_paths()[0]))


@pytest.fixture(scope="session")
def fixture_run(tmp_path_factory):
    """One pipeline run on the bundled fixture, shared by the integration tests."""
    out = tmp_path_factory.mktemp("run")
    cfg = PipelineConfig.from_ini(None, {"out": str(out)})
    report = run_pipeline(cfg)
    return out, report


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[VERDICTS] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
