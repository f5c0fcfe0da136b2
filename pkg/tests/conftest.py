from __future__ import annotations

import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hypothesis import settings  # noqa: E402

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def corpus_path() -> Path:
    return ROOT / "data" / "reference_corpus.txt"


# --- acceptance summary --------------------------------------------------------
# each criterion test records one line here; the lines are echoed at the end of the run
_ACCEPTANCE: dict[int, str] = {}


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title, self.notes = number, title, []

    def note(self, text: str) -> None:
        self.notes.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = "; ".join(self.notes)
        if exc_type is not None:
            detail = f"{detail}; {exc_type.__name__}: {exc}".lstrip("; ")
        line = f"[{status}] criterion {self.number:2d} {self.title}" + (f" ({detail})" if detail else "")
        _ACCEPTANCE[self.number] = line
        print(line)
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
