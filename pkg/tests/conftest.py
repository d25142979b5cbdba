import pytest

CRITERIA = {}


def record(number, ok, detail):
    """Note one acceptance criterion outcome; printed in the terminal summary."""
    CRITERIA.setdefault(number, []).append((bool(ok), detail))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        for ok, detail in CRITERIA[number]:
            terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def criteria():
    return record
