import math

import pytest
from hypothesis import settings

from optocool.model import AtomCouplingParams, DetectionParams, MembraneParams

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


@pytest.fixture
def measured_membrane():
    return MembraneParams.from_hz(76e-12, 264e3, 24.5e-3, 0.5)


@pytest.fixture
def measured_detection():
    return DetectionParams(7.4e-33)


@pytest.fixture
def measured_atoms(measured_membrane):
    return AtomCouplingParams(1e8, measured_membrane.omega_m, 0.11 * measured_membrane.omega_m,
                              0.42, 160.0)


@pytest.fixture
def scaled_membrane():
    """1 kHz, Q = 1e3 oscillator."""
    return MembraneParams.from_hz(1e-12, 1e3, 1.0, 0.5)


def rel(a, b):
    return abs(a - b) / abs(b)


# ---- acceptance summary ----------------------------------------------------

_ACCEPTANCE = {}


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for an acceptance criterion."""

    def record(label, passed, detail):
        _ACCEPTANCE[request.node.nodeid] = f"[{'PASS' if passed else 'FAIL'}] {label}: {detail}"
        print(_ACCEPTANCE[request.node.nodeid])
        return passed

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if (rep.when == "call" and rep.failed and "test_acceptance" in item.nodeid
            and item.nodeid not in _ACCEPTANCE):
        _ACCEPTANCE[item.nodeid] = f"[FAIL] {item.name}: raised {call.excinfo.typename}"


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for nodeid in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[nodeid])
