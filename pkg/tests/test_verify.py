import math

import numpy as np
import pytest

from kyleback import (BatteryConfig, BridgeKernel, InsufficientPaths, InvalidParameter, PricingRule, SimConfig,
                      StaticSpec, Strategy, StepResolution, density_grid, run_battery, simulate_equilibrium,
                      simulate_many, verify_admissibility, verify_bridge_convergence, verify_density_identities,
                      verify_optimality, verify_order_flow_brownian, verify_rational_pricing,
                      verify_static_v_invariance)
from kyleback.verify import doleans_dade, utility

FAST = dict(n_steps=2 ** 11, epsilon=2.0 ** -11)


@pytest.fixture(scope="module")
def small_run(det):
    model, rule, _ = det
    strategies = [Strategy.equilibrium(), Strategy.zero(), Strategy.scaled(0.5), Strategy.scaled(2.0),
                  Strategy.jump(0.5, 0.5)]
    return simulate_many(model, rule, strategies, SimConfig(n_paths=16384, seed=11, **FAST))


def test_utility_and_degenerate_exponential():
    assert utility(0.0, 2.0) == -0.5
    assert np.all(doleans_dade(np.zeros(4), np.zeros(4), 1.0) == 1.0)


def test_density_identities_gaussian(det):
    entries = verify_density_identities(BridgeKernel(det[0]), oracle=det[2])
    assert {e.name for e in entries} == {"density_normalization_p", "density_normalization_rho",
                                         "density_chapman_kolmogorov", "density_score_mean",
                                         "density_gaussian_match"}
    assert all(e.passed for e in entries), [(e.name, e.estimate) for e in entries]


def test_density_identities_quadratic(quad_family):
    entries = verify_density_identities(BridgeKernel(quad_family[0]))
    assert all(e.passed for e in entries), [(e.name, e.estimate) for e in entries]


def test_density_grid_shape(det):
    grid = density_grid(BridgeKernel(det[0]), "p", pairs=((0.0, 0.5),), starts=(0.0,), ends=(-1.0, 0.0, 1.0))
    assert grid.shape == (3, 5)
    assert np.all(grid[:, 4] > 0)


def test_rational_pricing_passes_and_control_fails(small_run):
    eq = verify_rational_pricing(small_run["equilibrium"])
    assert len(eq) == 3 and all(e.passed for e in eq)
    control = verify_rational_pricing(small_run["zero"], expect_pass=False)
    assert len(control) == 1 and not control[0].passed and control[0].ok


def test_rational_pricing_needs_paths(det):
    b = simulate_equilibrium(det[0], det[1], cfg=SimConfig(n_paths=100, **FAST))
    with pytest.raises(InsufficientPaths):
        verify_rational_pricing(b)
    with pytest.raises(InvalidParameter):
        verify_rational_pricing(b, min_paths=10, n_bins=0)


def test_brownian_order_flow(small_run):
    eq = verify_order_flow_brownian(small_run["equilibrium"])
    assert [e.name for e in eq] == ["brownian_mean", "brownian_variance", "brownian_ks", "brownian_serial"]
    assert all(e.passed for e in eq), [(e.name, e.estimate) for e in eq]
    control = verify_order_flow_brownian(small_run["scaled(2)"], expect_pass=False)
    assert control[0].ok and control[0].estimate >= 1


def test_optimality_entries(small_run, det):
    model, rule, _ = det
    entries = {e.name: e for e in verify_optimality(small_run, model, rule)}
    for label in ("zero", "scaled(0.5)", "scaled(2)", "jump(0.5,0.5)"):
        assert entries[f"optimality[{label}]"].passed
    assert entries["jump_penalty[jump(0.5,0.5)]"].estimate <= 1e-10
    assert entries["optimality_value_identity"].passed


def test_admissibility(small_run, det):
    entries = {e.name: e for e in verify_admissibility(small_run["equilibrium"], det[0])}
    assert entries["admissibility_degenerate"].estimate == 1.0
    assert entries["admissibility_exponential"].passed
    assert entries["admissibility_u_martingale"].passed


def test_bridge_rejects_unresolvable_grid(det):
    with pytest.raises(StepResolution):
        verify_bridge_convergence(det[0], det[1], epsilons=(2.0 ** -8, 1e-17), n_steps=64)
    with pytest.raises(InsufficientPaths):
        verify_bridge_convergence(det[0], det[1], n_paths=10)


def test_bridge_convergence_small(det):
    entries = {e.name: e for e in verify_bridge_convergence(det[0], det[1], epsilons=(2.0 ** -6, 2.0 ** -10),
                                                            n_steps=2 ** 12)}
    assert entries["bridge_decreasing"].passed and entries["bridge_ratio"].passed


def test_static_invariance_small():
    entries = verify_static_v_invariance(StaticSpec(), n_paths=4000, **FAST)
    assert len(entries) == 1 and entries[0].passed


def test_battery_flags_tampered_rule(det):
    cfg = BatteryConfig(n_paths=2000, tests=("assumptions", "brownian"), **FAST)
    rep = run_battery(det[0], PricingRule.constant(1.0), cfg)
    assert not rep.overall
    assert not rep["assumption_w_pde_residual"].passed


def test_battery_rejects_unknown_test():
    with pytest.raises(InvalidParameter):
        BatteryConfig(tests=("bogus",))


def test_battery_subset(det):
    rep = run_battery(det[0], det[1], BatteryConfig(tests=("density",)))
    assert all(n.startswith("density_") for n in rep.names())
    assert rep.overall
