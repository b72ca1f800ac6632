import sys

import pytest

from kyleback import (DeterministicVolSpec, QuadraticVolSpec, StaticSpec, build_deterministic,
                      build_quadratic, build_static)


@pytest.fixture(scope="session")
def det():
    """Deterministic-volatility family at gamma=1, q=0.01, Sigma=0.1: (model, rule, oracle)."""
    return build_deterministic(DeterministicVolSpec())


@pytest.fixture(scope="session")
def quad_family():
    return build_quadratic(QuadraticVolSpec())


@pytest.fixture(scope="session")
def static_family():
    return build_static(StaticSpec())


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for key in sorted(results):
            terminalreporter.write_line(results[key])
