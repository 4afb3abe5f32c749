import pytest

_RESULTS = {}


class Reporter:
    """Collects one pass/fail line per acceptance criterion."""

    def __init__(self, capsys):
        self.capsys = capsys

    def __call__(self, number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _RESULTS[number] = line
        with self.capsys.disabled():
            print("\n" + line, flush=True)
        return ok


@pytest.fixture
def report(capsys):
    return Reporter(capsys)


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_RESULTS):
            terminalreporter.write_line(_RESULTS[k])
