"""Session-scoped corpus build shared by the fixture tests."""

from __future__ import annotations

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import build as corpus_build          # fixtures/build.py


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    manifest = corpus_build.build_corpus(str(out), verbose=False)
    return str(out), manifest


@pytest.fixture(scope="session")
def fixture_entries(corpus):
    out, manifest = corpus
    return {fx["name"]: (os.path.join(out, os.path.basename(fx["binary"])), fx)
            for fx in manifest["fixtures"]}
