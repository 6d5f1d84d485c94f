import pytest

CRITERIA: dict[int, str] = {}


@pytest.fixture
def report_criterion(request):
    """Record a one-line PASS/FAIL verdict for an acceptance criterion."""

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        CRITERIA[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[number])
