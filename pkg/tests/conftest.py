import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from honeydoc.scenario import SCENARIO_DIR  # noqa: E402

ACCEPTANCE_LINES = []


@pytest.fixture
def scenario_dir():
    return SCENARIO_DIR


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
