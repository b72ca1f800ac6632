import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kyleback import (AssumptionViolation, DeterministicVolSpec, InvalidParameter, PricingRule, QuadraticVolSpec,
                      StaticSpec, build_custom, build_deterministic, build_quadratic, build_static,
                      limit_sequence, validate_assumptions)


def test_deterministic_constants(det):
    model, _, oracle = det
    assert oracle.C == pytest.approx((-1 + math.sqrt(201)) / 2, abs=1e-12)
    assert abs(model.V(1.0) - 1.0) < 1e-9
    assert model.V(0.0) == pytest.approx(0.4647327, abs=1e-7)


def test_oracle_variance_composes(det):
    oracle = det[2]
    for s, u, t in ((0.0, 0.3, 0.5), (0.2, 0.6, 0.9)):
        # base increments are independent in the scaled coordinate (gamma t + C) x
        lhs = oracle.G(s, t) * (s + oracle.C) ** 2
        rhs = (oracle.G(s, u) * (s + oracle.C) ** 2
               + oracle.G(u, t) * (u + oracle.C) ** 2 * ((s + oracle.C) / (u + oracle.C)) ** 2)
        assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.parametrize("spec", [
    DeterministicVolSpec(1.0, 0.0, 1.0),
    DeterministicVolSpec(-1.0, 0.01, 0.1),
    DeterministicVolSpec(1.0, -0.1, 0.1),
])
def test_infeasible_deterministic_rejected(spec):
    with pytest.raises(AssumptionViolation):
        build_deterministic(spec)


def test_excluded_terminal_volatility_rejected(det):
    C = det[2].C
    excluded = 1.0 / C - 0.01 - 0.01
    # Sigma^2 integrates to 0.01 regardless of the single point t = 1
    with pytest.raises(AssumptionViolation, match="excluded"):
        build_deterministic(DeterministicVolSpec(Sigma=lambda t: 0.1 if t < 1.0 else excluded))


def test_time_varying_sigma():
    model, rule, oracle = build_deterministic(DeterministicVolSpec(Sigma=lambda t: 0.12 - 0.04 * t))
    assert abs(model.V(1.0) - 1.0) < 1e-9
    assert validate_assumptions(model, rule).overall


@pytest.mark.parametrize("delta", [0.0, 1.0, 1.5, -2.0])
def test_quadratic_rejects_large_delta(delta):
    with pytest.raises(AssumptionViolation):
        build_quadratic(QuadraticVolSpec(delta=delta))


def test_quadratic_rejects_wrong_sign_ratio():
    with pytest.raises(AssumptionViolation):
        build_quadratic(QuadraticVolSpec(d=-0.5))


def test_quadratic_clock(quad_family):
    model, _ = quad_family
    assert model.V(1.0) == 1.0
    assert model.V(0.0) == pytest.approx(0.75)
    assert model.interval == pytest.approx((-1.0, 1.0))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(-0.999, 0.999))
def test_quadratic_a_solves_pde(quad_family, t, x):
    m = quad_family[0]
    a = m.a(t, x)
    assert a > 0
    assert abs(m.a_t(t, x) / a ** 2 + m.a_xx(t, x) / 2 + m.gamma) < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(-5, 5))
def test_gaussian_a_solves_pde(det, t, x):
    m = det[0]
    a = m.a(t, x)
    assert abs(m.a_t(t, x) / a ** 2 + m.a_xx(t, x) / 2 + m.gamma) < 1e-10


def test_static_clocks(static_family):
    model, rule = static_family
    assert model.V(0.3) == 1.0 and model.sigma(0.3) == 0.0
    lin, _ = build_static(StaticSpec(v0=0.5))
    assert lin.V(0.0) == 0.5 and lin.V(1.0) == 1.0
    with pytest.raises(AssumptionViolation):
        build_static(StaticSpec(v0=1.5))
    with pytest.raises(InvalidParameter):
        build_static(StaticSpec(base="cubic"))


def test_limit_sequence_static_closed_form():
    # V = 1, sigma = 0: M = t (1 - t) and Lambda = t / (1 - t)
    ks = np.arange(4, 20)
    t = 1 - 2.0 ** -ks
    got = limit_sequence(lambda s: 1.0, lambda s: 0.0, ks)
    assert np.allclose(got, t * (1 - t) * np.log(t / (1 - t)), atol=1e-10)


@pytest.mark.parametrize("family", ["det", "quad_family", "static_family"])
def test_validate_assumptions_pass(request, family):
    model, rule = request.getfixturevalue(family)[:2]
    rep = validate_assumptions(model, rule)
    assert rep.overall, rep.table()


def test_validate_flags_tampered_rule(det):
    rep = validate_assumptions(det[0], PricingRule.constant(1.0))
    assert not rep.overall
    assert not rep["w_pde_residual"].passed
    assert rep["a_pde_residual"].passed


def test_validate_flags_bad_clock():
    g, C = 1.0, 1.0
    a = lambda t, x: 1.0 / (g * t + C) + 0.0 * x
    model, rule = build_custom(g, a, lambda t: 0.5, lambda t: 0.9 + 0.0 * t,
                               a_t=lambda t, x: -g / (g * t + C) ** 2 + 0.0 * x,
                               a_x=lambda t, x: 0.0 * x, a_xx=lambda t, x: 0.0 * x)
    rep = validate_assumptions(model, rule)
    assert not rep["V_terminal"].passed
    assert not rep.overall
