"""Shared test infrastructure: acceptance-criterion result reporting."""

ACCEPTANCE_LINES = []


def record_criterion(number, description, passed):
    """Log one acceptance line; shown in the terminal summary."""
    status = "PASS" if passed else "FAIL"
    ACCEPTANCE_LINES.append((number, f"{status}  criterion {number}: {description}"))
    return passed


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
