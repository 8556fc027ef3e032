"""Shared pytest plumbing: collects acceptance-check result lines and
prints them in one block at the end of the session."""

ACCEPTANCE_LINES = []


def record_line(line: str) -> None:
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance checks")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
