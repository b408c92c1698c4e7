import pytest

_LINES = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion; they are echoed in the terminal summary."""

    def report(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        _LINES.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
