"""Shared test plumbing: collects acceptance-criterion result lines and prints
them in the terminal summary so they are visible under output capture."""

_acceptance_lines = []


def record_acceptance(line: str) -> None:
    _acceptance_lines.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
