import pytest

_CRITERIA = []


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion."""

    def record(number, passed, detail, seconds, budget):
        ok = bool(passed) and seconds < budget
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}  [{seconds:.1f}s / {budget:.0f}s]"
        _CRITERIA.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_CRITERIA):
            terminalreporter.write_line(line)
