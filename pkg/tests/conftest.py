import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def record_acceptance():
    """Append a one-line verdict for the terminal summary."""

    def _record(number, name, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}  {name}: {detail}"
        ACCEPTANCE_LINES.append((number, line))
        print(line)
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
