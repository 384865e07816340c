"""Shared pytest plumbing: the acceptance summary block.

Acceptance tests append one "[PASS]/[FAIL] criterion" line each; the
terminal-summary hook prints the block after the run so the lines are
visible whether or not output capture is on.
"""

ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.ensure_newline()
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
