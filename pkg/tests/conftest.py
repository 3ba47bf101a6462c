import contextlib
import sys
import time

import pytest

_RESULTS = {}


@pytest.fixture
def criterion():
    """Context manager that records PASS/FAIL for one numbered acceptance criterion."""

    @contextlib.contextmanager
    def run(number, title):
        t0 = time.perf_counter()
        status = "FAIL"
        try:
            yield
            status = "PASS"
        finally:
            line = f"{status} [{number:2d}] {title} ({time.perf_counter() - t0:.1f}s)"
            _RESULTS[number] = line
            sys.__stdout__.write("\n" + line + "\n")

    return run


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        terminalreporter.write_line(_RESULTS[number])
