import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kyleback import BridgeKernel, DomainViolation, InvalidParameter, PricingRule, SingularDrift
from kyleback.transforms import (IntegratedScale, jump_penalty, jump_update, kw_inverse, kw_map, psi,
                                 psi_increment, psi_pde_residual)

times = st.floats(0.0, 0.95)
states = st.floats(-3.0, 3.0)


@pytest.fixture(scope="module")
def kernels(det):
    model = det[0]
    return BridgeKernel(model), BridgeKernel(model, mode="quadrature")


@settings(max_examples=40, deadline=None)
@given(times, states)
def test_closed_scale_matches_quadrature(kernels, det, t, x):
    closed, numeric = kernels
    oracle = det[2]
    assert closed.v(t, x) == pytest.approx(oracle.v(t, x), abs=1e-12)
    assert numeric.v(t, x) == pytest.approx(oracle.v(t, x), abs=1e-9)
    assert numeric.lam(t, numeric.v(t, x)) == pytest.approx(x, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(times, states)
def test_h_function_matches_closed_form(kernels, det, t, x):
    _, numeric = kernels
    assert numeric.log_u(t, x) == pytest.approx(math.log(det[2].u(t, x)), abs=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 0.8), states, st.floats(0.05, 0.2), states)
def test_rho_is_gaussian(kernels, det, s, y, dt, z):
    closed, _ = kernels
    assert closed.density_rho(s, y, s + dt, z) == pytest.approx(det[2].rho(s, y, s + dt, z), rel=1e-9)


def test_heat_residual_small(kernels):
    closed, _ = kernels
    for t in (0.1, 0.5, 0.9):
        for x in (-2.0, 0.0, 1.5):
            assert abs(closed.heat_residual(t, x)) < 1e-5


def test_density_rejects_reversed_times(kernels):
    with pytest.raises(InvalidParameter):
        kernels[0].density_p(0.5, 0.0, 0.5, 0.0)


def test_quadratic_domain_enforced(quad_family):
    k = BridgeKernel(quad_family[0])
    with pytest.raises(DomainViolation):
        k.v(0.5, 1.2)


@settings(max_examples=30, deadline=None)
@given(times, st.floats(-0.99, 0.99))
def test_quadratic_closed_matches_quadrature(quad_family, t, x):
    model = quad_family[0]
    closed, numeric = BridgeKernel(model), BridgeKernel(model, mode="quadrature")
    assert closed.v(t, x) == pytest.approx(numeric.v(t, x), abs=1e-8)
    assert closed.log_u(t, x) == pytest.approx(numeric.log_u(t, x), abs=1e-7)
    assert closed.lam(t, closed.v(t, x)) == pytest.approx(x, abs=1e-10)


def test_quadratic_inverse_saturates_inside_interval(quad_family):
    k = BridgeKernel(quad_family[0])
    lam = k.lam(0.5, np.array([-200.0, 200.0]))
    assert np.all(np.abs(lam) <= 1.0)


def test_equilibrium_drift_matches_oracle(det):
    model, rule, oracle = det
    k = BridgeKernel(model)
    t, xi, z = 0.4, 0.2, -0.3
    assert k.equilibrium_drift(rule, t, xi, z) == pytest.approx(oracle.alpha(t, xi, z), rel=1e-12)


def test_equilibrium_drift_singular_at_maturity(det):
    model, rule, _ = det
    with pytest.raises(SingularDrift):
        BridgeKernel(model).equilibrium_drift(rule, 1.0, 0.0, 0.0)


def test_integrated_scale_generic_roundtrip():
    f = lambda t, x: 1.0 + 0.5 * np.tanh(x) + 0.0 * t
    f_x = lambda t, x: 0.5 / np.cosh(x) ** 2 + 0.0 * t
    sc = IntegratedScale(f, f_x, (-math.inf, math.inf))
    for x in (-3.0, 0.0, 2.5):
        assert sc.inverse(0.3, sc.forward(0.3, x)) == pytest.approx(x, abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 0.99), st.floats(-2, 2), st.floats(-2, 2))
def test_kw_map_roundtrip_and_jump_penalty_sign(det, t, x, size):
    model, rule, oracle = det
    k = kw_map(rule, t, x)
    assert kw_inverse(rule, t, k) == pytest.approx(x, abs=1e-10)
    after = jump_update(rule, t, x, size)
    a_t = 1.0 / (model.gamma * t + oracle.C)
    assert after == pytest.approx(x + a_t * size, abs=1e-10)
    D = jump_penalty(rule, 0.7, t, x, after, size)
    assert D <= 1e-12
    assert D == pytest.approx(-(model.gamma * t + oracle.C) * (after - x) ** 2 / 2, abs=1e-10)


def test_psi_closed_vs_quadrature(det):
    model, rule, _ = det
    generic = PricingRule(rule.w, 0.0, rule.w_x, rule.w_xx, rule.w_t)
    for a, t, x in ((0.3, 0.2, -0.5), (-1.0, 0.7, 1.0)):
        assert psi(rule, a, t, x) == pytest.approx(psi(generic, a, t, x), abs=1e-9)
        assert psi_increment(rule, a, t, x, 0.1) == pytest.approx(psi_increment(generic, a, t, x, 0.1), abs=1e-9)


def test_psi_solves_its_pde(det):
    model, rule, _ = det
    for a, t, x in ((0.3, 0.2, -0.5), (-1.0, 0.7, 1.0)):
        assert abs(psi_pde_residual(rule, model.gamma, a, t, x)) < 1e-5
    assert psi(rule, 0.4, 1.0, 0.4) == pytest.approx(0.0, abs=1e-14)
