import pytest

CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance line, then assert it."""

    def record(number: int, title: str, ok: bool, measured: str):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {title} | {measured}"
        CRITERIA.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
