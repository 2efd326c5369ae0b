"""Shared pytest plumbing: collects the acceptance-criterion result lines so
they are echoed in the terminal summary even when output capture is on."""

CRITERION_LINES = []


def record_criterion(line: str):
    CRITERION_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERION_LINES):
            terminalreporter.write_line(line)
