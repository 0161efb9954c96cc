import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def criterion():
    """Record a pass/fail line for the terminal summary, then assert it."""

    def check(name: str, ok: bool, detail: str):
        _VERDICTS.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return check


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
