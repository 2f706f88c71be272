import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from smokenet import data  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_toy_dataset(root):
    """Four train, one val and one test synthetic 64x64 samples on disk; returns the manifest."""
    samples = data.synthetic_samples(6, 64, seed=1)
    data.write_dataset(root, samples[:4], "train")
    data.write_dataset(root, samples[4:5], "val")
    return data.write_dataset(root, samples[5:], "test")


@pytest.fixture
def toy_dataset(tmp_path):
    return make_toy_dataset(tmp_path / "ds")


_ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def record(name: str, ok: bool, detail: str = "") -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        _ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
