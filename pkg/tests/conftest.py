import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vmq import model as mdl

settings.register_profile("vmq", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("vmq")


@pytest.fixture(scope="session")
def tiny():
    return mdl.SIZES["tiny"]


@pytest.fixture(scope="session")
def tiny_model(tiny):
    return mdl.make_pathological_model(tiny)


@pytest.fixture(scope="session")
def tiny_calib(tiny):
    x, _ = mdl.gen_calibration_set(1, 64, tiny)
    return x


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = []


@pytest.fixture
def criterion(capsys):
    """Record one acceptance line and fail the test when it does not hold."""

    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA.append((n, line))
        with capsys.disabled():
            print(f"\n{line}")
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_CRITERIA, key=lambda t: (int(str(t[0]).rstrip("ab")), str(t[0]))):
            terminalreporter.write_line(line)
