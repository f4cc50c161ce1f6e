"""Shared pytest wiring: surface the acceptance criterion lines in the summary."""

import pytest

_REPORT_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Sink for per-criterion pass/fail lines, echoed in the terminal summary."""
    return _REPORT_LINES.append


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _REPORT_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in _REPORT_LINES:
        terminalreporter.write_line(line)
