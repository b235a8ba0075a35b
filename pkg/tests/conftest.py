import pytest

_REPORT = {}


@pytest.fixture
def report():
    """Record one acceptance line: ``report(n, passed, detail)``."""

    def record(number, passed, detail):
        _REPORT[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance")
        for number in sorted(_REPORT):
            terminalreporter.write_line(_REPORT[number])
