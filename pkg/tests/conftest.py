from __future__ import annotations

from pathlib import Path

import pytest
from hypothesis import settings

settings.register_profile("repo", deadline=None, max_examples=100)
settings.load_profile("repo")

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def synthetic_dir() -> Path:
    return FIXTURES / "synthetic"
