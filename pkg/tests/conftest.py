"""Shared pytest hooks."""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Replay per-criterion verdict lines after the test report.

    Passing tests have their stdout captured, so the acceptance module
    records its verdict lines and we print them here, where output is
    never swallowed.
    """
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "VERDICT_LINES", []) if module else []
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
