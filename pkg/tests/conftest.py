"""Collects one summary line per acceptance criterion and prints them at the end of the run."""

ACCEPTANCE_LINES = {}


def record(number, title, passed, detail):
    ACCEPTANCE_LINES[number] = f"{'PASS' if passed else 'FAIL'}  criterion {number}: {title}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
