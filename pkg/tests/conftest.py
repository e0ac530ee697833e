"""Shared test plumbing: collects acceptance one-liners for the summary."""

ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
