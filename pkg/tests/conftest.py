import pytest

_LINES: list[str] = []


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion; a test that dies early reports FAIL."""
    recorded = []

    def record(name: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        recorded.append(line)
        _LINES.append(line)
        print(line)
        return ok

    record.recorded = recorded
    yield record
    if not recorded:
        _LINES.append(f"FAIL  {request.node.name}: raised before reporting")


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
