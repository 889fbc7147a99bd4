import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one acceptance line; it is printed again in the terminal summary."""
    def _record(number, name, passed, detail, seconds):
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {name}: {detail} [{seconds:.1f} s]"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
