import time

import pytest

_LINES = []


class Recorder:
    """Collects one PASS/FAIL line per acceptance criterion."""

    def __init__(self):
        self.lines = _LINES

    def __call__(self, number, title, passed, detail="", seconds=None, budget=None):
        timing = ""
        if seconds is not None:
            timing = f" [{seconds:.1f}s" + (f" / budget {budget:g}s]" if budget else "]")
        status = "PASS" if passed else "FAIL"
        self.lines.append((number, f"{status} criterion {number:>2}: {title} {detail}{timing}".rstrip()))
        return passed


@pytest.fixture(scope="session")
def record():
    return Recorder()


@pytest.fixture
def stopwatch():
    t0 = time.perf_counter()
    return lambda: time.perf_counter() - t0


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_LINES, key=lambda x: x[0]):
        terminalreporter.write_line(line)
