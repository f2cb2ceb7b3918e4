import numpy as np
import pytest

from mempert.data import Dataset, Task

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


def record_criterion(number: int, name: str, passed: bool, detail: str = "") -> None:
    """Keep the latest verdict per acceptance criterion for the terminal summary."""
    prev = _CRITERIA.get(number)
    ok = passed and (prev is None or prev[1])
    parts = [d for d in ((prev[2] if prev else ""), detail) if d]
    _CRITERIA[number] = (name, ok, "; ".join(parts))


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        name, ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}  [{detail}]")


@pytest.fixture
def two_point():
    """Ridge data x = {1, 2}, y = {1, 2}, delta = 1."""
    return Dataset(np.array([[1.0], [2.0]]), np.array([1.0, 2.0]), Task.REGRESSION, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
