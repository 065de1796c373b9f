import pytest

# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES = {}


def record_criterion(number, title, passed, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number} ({title}): {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
