import numpy as np
import pytest

from quik import _backend


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=_backend.available())
def backend(request):
    """Run the test once per available kernel backend."""
    with _backend.use_backend(request.param):
        yield request.param


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
