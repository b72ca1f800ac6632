"""Acceptance criteria, one test per criterion.

Each test records a ``criterion N: PASS|FAIL`` line, printed as it runs
(visible with ``-s``) and echoed in the terminal summary (``conftest.py``).
"""

import json
import math

import numpy as np
import pytest

from kyleback import (BatteryConfig, BridgeKernel, DeterministicVolSpec, PricingRule, QuadraticVolSpec, SimConfig,
                      StaticSpec, AssumptionViolation, build_deterministic, build_quadratic, build_static,
                      run_battery, simulate_equilibrium, validate_assumptions, verify_bridge_convergence,
                      verify_density_identities, verify_static_v_invariance)
from kyleback.cli import load_config, cmd_verify

SEED = 20261016
N_PATHS = 100_000
N_STEPS = 2 ** 14
RESULTS = {}


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(RESULTS[n])
    assert ok, RESULTS[n]


def _failed(rep):
    return [f"{e.name}={e.estimate:.4g}" for e in rep.entries if not e.ok]


@pytest.fixture(scope="module")
def det_battery(det):
    model, rule, oracle = det
    cfg = BatteryConfig(n_paths=N_PATHS, n_steps=N_STEPS, seed=SEED,
                        tests=("rational_pricing", "brownian", "optimality", "admissibility"))
    return run_battery(model, rule, cfg)


def test_criterion_01_constructor(det):
    model, rule, oracle = det
    C_err = abs(oracle.C - (-1 + math.sqrt(201)) / 2)
    V_err = abs(model.V(1.0) - 1.0)
    t = np.arange(1000) / 1000
    standing = bool(np.all(0.01 + 0.01 * t > t / (oracle.C * (oracle.C + t))))
    try:
        build_deterministic(DeterministicVolSpec(1.0, 0.0, 1.0))
        rejected = False
    except AssumptionViolation:
        rejected = True
    ok = C_err < 1e-12 and V_err < 1e-9 and standing and rejected
    record(1, ok, f"|C err|={C_err:.1e} |V(1)-1|={V_err:.1e} standing={standing} infeasible rejected={rejected}")


def test_criterion_02_pde_residuals(det, quad_family):
    worst = {}
    for label, (model, rule) in (("gaussian", det[:2]), ("quadratic", quad_family)):
        rep = validate_assumptions(model, rule)
        worst[label] = (rep["a_pde_residual"].estimate, rep["w_pde_residual"].estimate)
    tampered = validate_assumptions(det[0], PricingRule.constant(1.0))["w_pde_residual"]
    ok = all(max(v) < 1e-10 for v in worst.values()) and not tampered.passed
    detail = " ".join(f"{k}: a={a:.1e} w={w:.1e}" for k, (a, w) in worst.items())
    record(2, ok, f"{detail}; tampered w residual={tampered.estimate:.3g} (fails={not tampered.passed})")


def test_criterion_03_heat_equation(det):
    k = BridgeKernel(det[0])
    T, X = np.meshgrid(np.linspace(0.0, 0.9, 50), np.linspace(-2.0, 2.0, 50), indexing="ij")
    h = 1e-4
    u = k.u(T, X)
    ut = (k.u(T + h, X) - k.u(T - h, X)) / (2 * h)
    uxx = (k.u(T, X + h) - 2 * u + k.u(T, X - h)) / (h * h)
    res = float(np.max(np.abs(ut + 0.5 * uxx)))
    record(3, res < 1e-5, f"max |u_t + u_xx/2| on 50x50 grid = {res:.2e}")


def test_criterion_04_density_equivalence(det):
    entries = {e.name: e for e in verify_density_identities(BridgeKernel(det[0], mode="quadrature"), det[2])}
    match = entries["density_gaussian_match"].estimate
    ck = entries["density_chapman_kolmogorov"].estimate
    score = entries["density_score_mean"].estimate
    ok = match < 1e-6 and ck < 1e-6 and score < 1e-8
    record(4, ok, f"rel err vs Gaussian={match:.1e} Chapman-Kolmogorov={ck:.1e} score={score:.1e}")


def test_criterion_05_bridge_convergence(det):
    entries = {e.name: e for e in verify_bridge_convergence(det[0], det[1], n_paths=1000, n_steps=N_STEPS,
                                                            seed=SEED)}
    rms = entries["bridge_final_rms"].meta["rms"]
    ok = all(e.passed for e in entries.values())
    record(5, ok, "RMS at eps=2^-8,2^-12,2^-16: " + ", ".join(f"{r:.2e}" for r in rms)
           + f"; min ratio={entries['bridge_ratio'].estimate:.2f}")


def test_criterion_06_rational_pricing(det_battery):
    eq = [e for e in det_battery.entries if e.name.startswith("rational_pricing[t=")]
    control = det_battery["rational_pricing[zero]"]
    ok = len(eq) == 3 and all(e.passed for e in eq) and control.ok and det_battery["path_exclusion"].passed
    worst = ", ".join(f"{e.name[17:-1]}:{e.estimate:.2f}" for e in eq)
    record(6, ok, f"max |z| per time {worst} (limit 3); zero control max |z|={control.estimate:.1f} fails")


def test_criterion_07_brownian_order_flow(det_battery):
    names = ("brownian_mean", "brownian_variance", "brownian_ks", "brownian_serial")
    eq = [det_battery[n] for n in names]
    control = det_battery["brownian[scaled(2)]"]
    ok = all(e.passed for e in eq) and control.ok
    detail = " ".join(f"{n[9:]}={e.estimate:.4g}" for n, e in zip(names, eq))
    record(7, ok, f"{detail}; kappa=2 control failed {control.estimate:.0f}/4 sub-tests")


def test_criterion_08_optimality(det_battery):
    devs = [e for e in det_battery.entries if e.name.startswith("optimality[")]
    pen = det_battery["jump_penalty[jump(0.5,0.5)]"]
    ident = det_battery["optimality_value_identity"]
    ok = len(devs) == 4 and all(e.passed for e in devs) and pen.passed and ident.passed
    detail = " ".join(f"{e.name[11:-1]}:{e.estimate / e.se:+.1f}SE" for e in devs)
    record(8, ok, f"U_eq - U_dev {detail}; value identity {ident.estimate / ident.se:+.2f}SE; "
                  f"max jump penalty={pen.estimate:.2e}")


def test_criterion_09_admissibility(det_battery):
    e = det_battery["admissibility_exponential"]
    degenerate = det_battery["admissibility_degenerate"]
    ok = e.passed and degenerate.estimate == 1.0
    record(9, ok, f"E[exp]={e.estimate:.5f} ({(e.estimate - 1) / e.se:+.2f}SE, limit 5SE); "
                  f"P=0 gives {degenerate.estimate!r}")


def test_criterion_10_quadratic(quad_family):
    model, rule = quad_family
    full = simulate_equilibrium(model, rule, cfg=SimConfig(n_paths=1000, n_steps=N_STEPS, seed=SEED, record_all=True))
    inside = bool(np.all(np.abs(full.Z) < 1) and np.all(np.abs(full.xi) < 1) and full.exclusion_rate == 0)
    rep = run_battery(model, rule, BatteryConfig(n_paths=N_PATHS, n_steps=N_STEPS, seed=SEED))
    escapes = rep["path_exclusion"].estimate
    ok = inside and escapes == 0 and model.V(1.0) == 1.0 and rep.overall
    failed = _failed(rep)
    record(10, ok, f"paths inside (-1,1)={inside and escapes == 0} V(1)={model.V(1.0)!r} "
                   f"battery {len(rep.entries)} entries, failed={failed or 'none'}")


def test_criterion_11_static(static_family):
    model, rule = static_family
    bridge = {e.name: e for e in verify_bridge_convergence(model, rule, n_paths=1000, n_steps=N_STEPS, seed=SEED)}
    inv = verify_static_v_invariance(StaticSpec(), (1.0, 0.5), n_paths=N_PATHS, n_steps=N_STEPS, seed=SEED)[0]
    ok = all(e.passed for e in bridge.values()) and inv.passed
    rms = bridge["bridge_final_rms"].meta["rms"]
    record(11, ok, "bridge RMS " + ", ".join(f"{r:.2e}" for r in rms)
           + f"; dU(V=1 vs linear)={inv.estimate:.2e} ({inv.estimate / inv.se:+.2f}SE)")


def test_criterion_12_reproducible_reports(tmp_path):
    texts = []
    for run in ("a", "b"):
        cfg = load_config(None)
        cfg["sim"]["seed"] = SEED
        cfg["verify"].update(n_paths=10_000, n_steps=2 ** 12, bridge_steps=2 ** 12,
                             bridge_epsilons=[2.0 ** -6, 2.0 ** -10])
        cfg["output"]["dir"] = str(tmp_path / run)
        cmd_verify(cfg)
        texts.append((tmp_path / run / "report.json").read_bytes())
    same = texts[0] == texts[1]
    n = len(json.loads(texts[0])["entries"])
    record(12, same, f"two cmd_verify runs, {n} entries, byte-identical JSON={same}")

