import os

import pytest

ACCEPTANCE_LINES = []

FULL_ACCEPTANCE = os.environ.get("FRACRITZ_FULL_ACCEPTANCE") == "1"


@pytest.fixture
def record():
    """Store one acceptance line: ``record(number, passed, detail)``."""

    def _record(number, passed, detail):
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
        ACCEPTANCE_LINES.append((number, f"criterion {number:>2}: {status}  {detail}"))

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
