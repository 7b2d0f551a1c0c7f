import shutil
from pathlib import Path

import pytest

from recheck.backend import ScriptedBackend
from recheck.demo import DATA_DIR


@pytest.fixture
def scripted():
    """Factory: a sequential scripted backend from response texts or entries."""

    def _make(responses):
        return ScriptedBackend(list(responses))

    return _make


@pytest.fixture
def demo_dir(tmp_path) -> Path:
    """A private copy of the bundled demo corpora."""
    target = tmp_path / "data"
    shutil.copytree(DATA_DIR, target)
    return target


# -- acceptance reporting ----------------------------------------------------

ACCEPTANCE_RESULTS: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        title, ok, detail = ACCEPTANCE_RESULTS[number]
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number}: {title} :: {detail}")
