import numpy as np
import pytest

from nanotfm import _backend
from nanotfm import tensor as T


@pytest.fixture(params=_backend.available())
def backend(request):
    """Run the test once per available kernel backend."""
    old = _backend.current()
    _backend.use(request.param)
    yield request.param
    _backend.use(old)


@pytest.fixture
def f64():
    with T.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = []


class _Criterion:
    def __init__(self, name):
        self.name = name
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        detail = self.detail
        if kind is AssertionError:
            detail = f"{detail} {exc}".strip()
        elif kind is not None:
            detail = f"{kind.__name__}: {exc}"
        status = "PASS" if kind is None else "FAIL"
        _CRITERIA.append(f"{status}  {self.name}" + (f"  ({detail})" if detail else ""))
        return False


@pytest.fixture
def criterion():
    """``with criterion("name") as c: ...`` records one PASS/FAIL line for the run summary."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
