import pytest

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, name, passed, detail)``."""

    def record(n, name, passed, detail=""):
        _CRITERIA[n] = f"criterion {n} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n])
