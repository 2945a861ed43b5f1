"""Shared pytest hooks: a per-criterion verdict table printed after the run."""

import pytest

VERDICTS = []


@pytest.fixture
def verdict():
    """Record one ``CRITERION n: PASS|FAIL details`` line for the summary."""

    def record(number, ok, details):
        VERDICTS.append((number, "PASS" if ok else "FAIL", details))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, details in sorted(VERDICTS, key=lambda v: str(v[0])):
        terminalreporter.write_line(f"CRITERION {number}: {status}  {details}")
