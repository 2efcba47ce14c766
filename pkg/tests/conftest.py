import pytest

_RESULTS = []


class Recorder:
    """Collects one pass/fail line per acceptance criterion."""

    def __call__(self, criterion, passed, detail=""):
        line = f"{'PASS' if passed else 'FAIL'}  {criterion}"
        if detail:
            line += f"  ({detail})"
        _RESULTS.append(line)
        print(line)
        return passed


@pytest.fixture
def record():
    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in _RESULTS:
        terminalreporter.write_line(line)
