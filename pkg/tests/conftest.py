import pytest

_CRITERIA: dict = {}


@pytest.fixture
def record_criterion():
    """Record one acceptance outcome; printed in the terminal summary."""

    def record(number: int, passed: bool, detail: str = ""):
        _CRITERIA[number] = (bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
