import numpy as np
import pytest

_CRITERIA = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion():
    """``criterion(n, title, passed, detail)`` records one acceptance line."""
    def record(n, title, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {n}: {title}" + (f" | {detail}" if detail else "")
        _CRITERIA[n] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
