from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dexi.corpus import load_corpus


@pytest.fixture(scope="session")
def corpus():
    return {entry.name: entry for entry in load_corpus()}
