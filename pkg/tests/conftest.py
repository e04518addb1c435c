import os
import sys
import sysconfig

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

_CORPUS_FILES = ["argparse.py", "difflib.py", "textwrap.py", "string.py"]


def stdlib_corpus() -> bytes:
    """Concatenated standard-library sources; plain text well over 100 KB."""
    root = sysconfig.get_paths()["stdlib"]
    parts = []
    for name in _CORPUS_FILES:
        with open(os.path.join(root, name), "rb") as fh:
            parts.append(fh.read())
    return b"\n".join(parts)


@pytest.fixture(scope="session")
def corpus_path(tmp_path_factory):
    data = stdlib_corpus()
    assert len(data) >= 100_000
    p = tmp_path_factory.mktemp("corpus") / "corpus.txt"
    p.write_bytes(data)
    return str(p)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
