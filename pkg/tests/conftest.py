from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mocks import make_png  # noqa: E402

ACCEPTANCE_RESULTS: list[tuple[str, str]] = []


@pytest.fixture
def subject_png(tmp_path):
    return make_png(tmp_path / "subject.png", seed=7)


@pytest.fixture
def second_png(tmp_path):
    return make_png(tmp_path / "generated.png", seed=11, color=(20, 160, 90))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"[{verdict}] {name}")
