from __future__ import annotations

from pathlib import Path

import pytest

from prefassess.datagen import MockT2IBackend, generate_dataset, load_dataset
from prefassess.profile import load_vocabulary
from prefassess.reward import RewardBackends
from prefassess.similarity import MockImageSimilarity, MockTextSimilarity

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def vocab():
    return load_vocabulary()


@pytest.fixture(scope="session")
def backend(vocab):
    return MockT2IBackend(vocab)


@pytest.fixture(scope="session")
def text_sim(vocab):
    return MockTextSimilarity(vocab)


@pytest.fixture(scope="session")
def backends(backend, text_sim):
    return RewardBackends(backend, text_sim, MockImageSimilarity())


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, vocab, backend):
    """100 mock users (seed 3), shared read-only across tests."""
    out = tmp_path_factory.mktemp("ds100")
    manifest = generate_dataset(vocab, 100, 0.25, 5, backend, 3, out)
    return out, manifest, load_dataset(out / "dataset.jsonl")


# --- acceptance reporting --------------------------------------------------

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def acceptance():
    """Record a criterion's verdict; the summary prints one line per criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE[number] = (bool(ok), detail)
        print(f"acceptance {number}: {'PASS' if ok else 'FAIL'} {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
