"""Shared test plumbing: the acceptance-criterion recorder.

Acceptance tests record one PASS/FAIL line each; the lines are echoed in
the terminal summary so a full `pytest` run ends with the release
checklist in plain sight, whether or not output capture is on.
"""

ACCEPTANCE_LINES = []

import pytest


@pytest.fixture
def criterion():
    def record(tag, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] {tag}" + (f" :: {detail}" if detail else "")
        ACCEPTANCE_LINES.append(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
