"""Shared pytest wiring.

Adds a terminal summary block for the shipping criteria in
test_acceptance.py: one PASS/FAIL line per criterion. A criterion passes
when its test ran to completion and recorded a summary line; a criterion
that started but never recorded (an assertion or error stopped it) is
reported FAIL. Criteria that were not collected in this run are omitted.
"""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    started = getattr(mod, "STARTED", {})
    results = getattr(mod, "RESULTS", {})
    if not started:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(started):
        detail = results.get(num)
        if detail is None:
            terminalreporter.write_line(
                f"criterion {num:2d} [{started[num]}]: FAIL")
        else:
            terminalreporter.write_line(
                f"criterion {num:2d} [{started[num]}]: PASS — {detail}")
