"""Command-line front end: ``kyleback {validate,simulate,verify,sweep,density}``.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import math
import re
import sys
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .core import (DEFAULT_EPSILON, DEFAULT_STEPS, AssumptionViolation, Entry, KyleBackError,
                   InvalidParameter, PricingRule, QuadratureFailure, VerificationReport, mean_se)
from .signals import (DeterministicVolSpec, QuadraticVolSpec, StaticSpec, build_deterministic,
                      build_quadratic, build_static, validate_assumptions)
from .simulate import SimConfig, Strategy, simulate_many
from .transforms import BridgeKernel
from .verify import (BRIDGE_EPSILONS, CHECKPOINTS, DENSITY_ENDS, DENSITY_PAIRS, DENSITY_STARTS, TESTS,
                     BatteryConfig, density_grid, run_battery)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
MAX_EXCLUSION = 1e-3

DEFAULTS = {
    "model": {"kind": "deterministic", "gamma": 1.0, "q": 0.01, "Sigma": 0.1, "delta": 0.5, "b": 0.0,
              "d": 0.5, "base": "gaussian", "C": 1.0, "v0": 1.0},
    "rule": {"kind": "equilibrium", "value": 1.0},
    "sim": {"n_paths": 1000, "n_steps": DEFAULT_STEPS, "epsilon": DEFAULT_EPSILON, "seed": 0,
            "scheme": "auto", "strategies": ["equilibrium"], "record_times": list(CHECKPOINTS)},
    "verify": {"tests": list(TESTS), "n_paths": 100_000, "n_steps": DEFAULT_STEPS, "k_se": 3.0,
               "k_se_exp": 5.0, "n_bins": 20, "checkpoints": list(CHECKPOINTS), "bridge_paths": 1000,
               "bridge_steps": DEFAULT_STEPS, "bridge_epsilons": list(BRIDGE_EPSILONS),
               "kappas": [0.5, 2.0], "jump": [0.5, 0.5], "static_v0s": [1.0, 0.5],
               "density_mode": "auto"},
    "sweep": {"parameter": "gamma", "values": [], "n_paths": 20_000, "rescale": True},
    "density": {"pairs": [list(p) for p in DENSITY_PAIRS], "starts": list(DENSITY_STARTS),
                "ends": [float(e) for e in DENSITY_ENDS]},
    "output": {"dir": "out", "formats": ["json", "csv", "table"]},
}

MODEL_KEYS = {
    "deterministic": {"kind", "gamma", "q", "Sigma"},
    "quadratic": {"kind", "gamma", "delta", "b", "d"},
    "static": {"kind", "gamma", "base", "C", "delta", "b", "d", "v0"},
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration

def load_config(path: Optional[str]) -> dict:
    """Read a TOML config and merge it over the defaults; unknown keys are rejected."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for section, values in raw.items():
        if section not in cfg:
            raise UsageError(f"unknown config section [{section}]")
        if not isinstance(values, dict):
            raise UsageError(f"[{section}] must be a table")
        for key, val in values.items():
            if key not in cfg[section]:
                raise UsageError(f"unknown key {section}.{key}")
            cfg[section][key] = val
    kind = cfg["model"]["kind"]
    if kind not in MODEL_KEYS:
        raise UsageError(f"model.kind must be one of {sorted(MODEL_KEYS)}")
    extra = set(raw.get("model", {})) - MODEL_KEYS[kind]
    if extra:
        raise UsageError(f"keys {sorted(extra)} do not apply to model kind {kind!r}")
    return cfg


def apply_overrides(cfg: dict, args) -> dict:
    cfg = copy.deepcopy(cfg)
    if args.seed is not None:
        cfg["sim"]["seed"] = args.seed
    if args.paths is not None:
        cfg["sim"]["n_paths"] = args.paths
        cfg["verify"]["n_paths"] = args.paths
    if args.steps is not None:
        cfg["sim"]["n_steps"] = args.steps
        cfg["verify"]["n_steps"] = args.steps
    if args.epsilon is not None:
        cfg["sim"]["epsilon"] = args.epsilon
    if args.out is not None:
        cfg["output"]["dir"] = args.out
    if args.only:
        names = [n.strip() for n in args.only.split(",") if n.strip()]
        bad = set(names) - set(TESTS)
        if bad:
            raise UsageError(f"unknown test(s) {sorted(bad)}; choose from {', '.join(TESTS)}")
        cfg["verify"]["tests"] = names
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps({k: v for k, v in cfg.items() if k != "output"}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_model(model_cfg: dict, rule_cfg: Optional[dict] = None):
    """Model, pricing rule, Gaussian oracle or None, and StaticSpec or None."""
    m = model_cfg
    kind = m["kind"]
    oracle = static_spec = None
    if kind == "deterministic":
        model, rule, oracle = build_deterministic(DeterministicVolSpec(m["gamma"], m["q"], m["Sigma"]))
    elif kind == "quadratic":
        model, rule = build_quadratic(QuadraticVolSpec(m["gamma"], m["delta"], m["b"], m["d"]))
    else:
        static_spec = StaticSpec(m["base"], m["gamma"], m["C"], m["delta"], m["b"], m["d"], m["v0"])
        model, rule = build_static(static_spec)
    rule_cfg = rule_cfg or {"kind": "equilibrium"}
    if rule_cfg["kind"] == "constant":
        rule = PricingRule.constant(float(rule_cfg["value"]))
    elif rule_cfg["kind"] != "equilibrium":
        raise UsageError("rule.kind must be 'equilibrium' or 'constant'")
    return model, rule, oracle, static_spec


def parse_strategy(text: str) -> Strategy:
    parts = text.split(":")
    try:
        if parts[0] == "equilibrium":
            return Strategy.equilibrium()
        if parts[0] == "zero":
            return Strategy.zero()
        if parts[0] == "scaled":
            return Strategy.scaled(float(parts[1]))
        if parts[0] == "jump":
            return Strategy.jump(float(parts[1]), float(parts[2]))
    except (IndexError, ValueError) as exc:
        raise UsageError(f"bad strategy {text!r}") from exc
    raise UsageError(f"unknown strategy {text!r}; use equilibrium, zero, scaled:K or jump:T:S")


def battery_config(cfg: dict, oracle=None, static_spec=None, n_paths: Optional[int] = None) -> BatteryConfig:
    v = cfg["verify"]
    return BatteryConfig(
        n_paths=int(n_paths or v["n_paths"]), n_steps=int(v["n_steps"]), epsilon=float(cfg["sim"]["epsilon"]),
        seed=int(cfg["sim"]["seed"]), scheme=cfg["sim"]["scheme"], checkpoints=tuple(v["checkpoints"]),
        n_bins=int(v["n_bins"]), k_se=float(v["k_se"]), k_se_exp=float(v["k_se_exp"]),
        bridge_paths=int(v["bridge_paths"]), bridge_steps=int(v["bridge_steps"]),
        bridge_epsilons=tuple(v["bridge_epsilons"]), kappas=tuple(v["kappas"]),
        jump=tuple(v["jump"]) if v["jump"] else (), static_v0s=tuple(v["static_v0s"]),
        density_mode=v["density_mode"], tests=tuple(v["tests"]), static_spec=static_spec, oracle=oracle)


# ---------------------------------------------------------------------------
# output helpers

def _outdir(cfg: dict) -> Path:
    path = Path(cfg["output"]["dir"])
    path.mkdir(parents=True, exist_ok=True)
    return path


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x)) if math.isfinite(x) else ""
    return str(x)


def write_csv(path: Path, header: list, rows, chash: str, seed: int) -> None:
    buf = io.StringIO()
    buf.write(f"# config_hash: {chash}\n# seed: {seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    path.write_text(buf.getvalue())


def emit_report(rep: VerificationReport, cfg: dict, stem: str) -> None:
    out = _outdir(cfg)
    fmts = cfg["output"]["formats"]
    text = rep.to_json()
    if "json" in fmts:
        (out / f"{stem}.json").write_text(text)
    table = f"# config_hash: {rep.config_hash}\n# seed: {rep.seed}\n" + rep.table()
    if "table" in fmts:
        (out / f"{stem}.txt").write_text(table)
    sys.stdout.write(table)


# ---------------------------------------------------------------------------
# commands

def cmd_validate(cfg: dict) -> int:
    chash, seed = config_hash(cfg), int(cfg["sim"]["seed"])
    try:
        model, rule, _, _ = build_model(cfg["model"], cfg["rule"])
    except AssumptionViolation as exc:
        rep = VerificationReport(seed=seed, config_hash=chash)
        rep.add(Entry("constructor", math.nan, meta={"error": str(exc)}))
        emit_report(rep, cfg, "validate")
        return EXIT_FAIL
    rep = validate_assumptions(model, rule, epsilon=float(cfg["sim"]["epsilon"]))
    rep.seed, rep.config_hash = seed, chash
    emit_report(rep, cfg, "validate")
    return EXIT_OK if rep.overall else EXIT_FAIL


def _sim_config(cfg: dict, n_paths=None, record_all=False) -> SimConfig:
    s = cfg["sim"]
    return SimConfig(n_paths=int(n_paths or s["n_paths"]), n_steps=int(s["n_steps"]),
                     epsilon=float(s["epsilon"]), seed=int(s["seed"]), scheme=s["scheme"],
                     record_times=tuple(s["record_times"]), record_all=record_all)


def cmd_simulate(cfg: dict, dump_paths: int = 0) -> int:
    chash, seed = config_hash(cfg), int(cfg["sim"]["seed"])
    model, rule, _, _ = build_model(cfg["model"], cfg["rule"])
    strategies = [parse_strategy(s) for s in cfg["sim"]["strategies"]]
    bundles = simulate_many(model, rule, strategies, _sim_config(cfg))
    out = _outdir(cfg)
    rows = []
    worst = 0.0
    for label, b in bundles.items():
        ok = b.ok
        worst = max(worst, b.exclusion_rate)
        for j, t in enumerate(b.times):
            row = [label, float(t), int(ok.sum())]
            for arr in (b.Z, b.xi, b.Y, b.theta):
                m, se = mean_se(arr[ok, j])
                row += [m, se, float(np.var(arr[ok, j], ddof=1)) if ok.sum() > 1 else math.nan]
            rows.append(row + [math.nan] * 3)
        w_ok = np.isfinite(b.wealth)
        terminal = [label, 1.0, int(w_ok.sum()), *mean_se(b.Z1[w_ok]), float(np.var(b.Z1[w_ok], ddof=1))]
        terminal += [math.nan] * 9
        terminal += [*mean_se(b.wealth[w_ok]), float(np.var(b.wealth[w_ok], ddof=1))]
        rows.append(terminal)
    header = ["strategy", "t", "n"]
    for name in ("Z", "xi", "Y", "theta"):
        header += [f"{name}_mean", f"{name}_se", f"{name}_var"]
    header += ["wealth_mean", "wealth_se", "wealth_var"]
    write_csv(out / "summary.csv", header, rows, chash, seed)
    if dump_paths:
        full = simulate_many(model, rule, strategies, _sim_config(cfg, n_paths=dump_paths, record_all=True))
        for label, b in full.items():
            pdir = out / "paths" / re.sub(r"[^A-Za-z0-9.]+", "_", label).strip("_")
            pdir.mkdir(parents=True, exist_ok=True)
            for i in range(b.n_paths):
                prow = zip(b.times, b.B[i], b.Z[i], b.xi[i], b.Y[i], b.theta[i])
                write_csv(pdir / f"path_{i:04d}.csv", ["t", "B", "Z", "xi", "Y", "theta"], prow,
                          chash, seed)
    sys.stdout.write(f"wrote {out / 'summary.csv'} (exclusion rate {worst:.3g})\n")
    return EXIT_OK if worst <= MAX_EXCLUSION else EXIT_FAIL


def cmd_verify(cfg: dict) -> int:
    chash, seed = config_hash(cfg), int(cfg["sim"]["seed"])
    try:
        model, rule, oracle, static_spec = build_model(cfg["model"], cfg["rule"])
    except AssumptionViolation as exc:
        rep = VerificationReport(seed=seed, config_hash=chash)
        rep.add(Entry("constructor", math.nan, meta={"error": str(exc)}))
        emit_report(rep, cfg, "report")
        return EXIT_FAIL
    rep = run_battery(model, rule, battery_config(cfg, oracle, static_spec))
    rep.config_hash = chash
    emit_report(rep, cfg, "report")
    return EXIT_OK if rep.overall else EXIT_FAIL


def _sweep_model(cfg: dict, param: str, value: float) -> dict:
    m = dict(cfg["model"])
    if param not in m or param == "kind":
        raise UsageError(f"cannot sweep {param!r} for model kind {m['kind']!r}")
    if param == "gamma" and cfg["sweep"]["rescale"] and m["kind"] == "deterministic":
        # scaling Z by s maps (gamma, q, Sigma) to (gamma/s, s^2 q, s Sigma) and keeps feasibility
        if callable(m["Sigma"]):
            raise UsageError("rescaling needs a constant Sigma")
        s = m["gamma"] / value
        m["q"], m["Sigma"] = m["q"] * s * s, m["Sigma"] * s
    m[param] = value
    return m


def cmd_sweep(cfg: dict) -> int:
    sw = cfg["sweep"]
    values = list(sw["values"])
    if not values:
        raise UsageError("sweep.values is empty")
    chash, seed = config_hash(cfg), int(cfg["sim"]["seed"])
    rows, long_rows = [], []
    any_fail = False
    for value in values:
        mcfg = _sweep_model(cfg, sw["parameter"], float(value))
        row = {"value": float(value), "U_eq": math.nan, "rms_gap": math.nan, "admissibility": math.nan,
               "valid": False, "overall": False, "error": ""}
        try:
            model, rule, oracle, static_spec = build_model(mcfg, cfg["rule"])
            valid = validate_assumptions(model, rule, epsilon=float(cfg["sim"]["epsilon"])).overall
            row["valid"] = valid
            rep = run_battery(model, rule, battery_config(cfg, oracle, static_spec, n_paths=sw["n_paths"] or None))
            row["overall"] = rep.overall
            names = rep.names()
            if "optimality_value_identity" in names:
                row["U_eq"] = rep["optimality_value_identity"].meta["U_eq"]
            if "bridge_final_rms" in names:
                row["rms_gap"] = rep["bridge_final_rms"].estimate
            if "admissibility_exponential" in names:
                row["admissibility"] = rep["admissibility_exponential"].estimate
            for e in rep.entries:
                long_rows.append([float(value), e.name, e.estimate, e.target, e.tolerance, e.passed, e.ok])
            any_fail |= not valid
        except (AssumptionViolation, KyleBackError) as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
            any_fail = True
        rows.append(row)
    out = _outdir(cfg)
    header = ["value", "U_eq", "rms_gap", "admissibility", "valid", "overall", "error"]
    write_csv(out / "sweep.csv", [sw["parameter"]] + header[1:], [[r[h] for h in header] for r in rows],
              chash, seed)
    write_csv(out / "sweep_long.csv", [sw["parameter"], "test", "estimate", "target", "tolerance", "passed", "ok"],
              long_rows, chash, seed)
    for r in rows:
        sys.stdout.write(f"{sw['parameter']}={r['value']:g}  U_eq={r['U_eq']:.6g}  rms={r['rms_gap']:.3g}  "
                         f"adm={r['admissibility']:.6g}  valid={r['valid']}  overall={r['overall']} {r['error']}\n")
    return EXIT_FAIL if any_fail else EXIT_OK


def cmd_density(cfg: dict, s: Optional[float] = None, t: Optional[float] = None,
                lo: Optional[float] = None, hi: Optional[float] = None, points: int = 41) -> int:
    chash, seed = config_hash(cfg), int(cfg["sim"]["seed"])
    d = cfg["density"]
    pairs = [tuple(p) for p in d["pairs"]]
    ends = list(d["ends"])
    if s is not None or t is not None:
        if s is None or t is None:
            raise UsageError("--s and --t must be given together")
        pairs = [(s, t)]
    for a, b in pairs:
        if not 0.0 <= a < b <= 1.0:
            raise UsageError(f"density needs 0 <= s < t <= 1, got s={a}, t={b}")
    if lo is not None:
        if not lo < hi:
            raise UsageError("--range needs lo < hi")
        ends = list(np.linspace(lo, hi, points))
    model, _, _, _ = build_model(cfg["model"], cfg["rule"])
    kernel = BridgeKernel(model)
    out = _outdir(cfg)
    try:
        for kind in ("rho", "p"):
            grid = density_grid(kernel, kind, pairs, d["starts"], ends)
            write_csv(out / f"density_{kind}.csv", ["s", "x", "t", "y", "value"], grid.tolist(), chash, seed)
    except QuadratureFailure as exc:
        sys.stderr.write(f"quadrature failure: {exc}\n")
        return EXIT_FAIL
    sys.stdout.write(f"wrote {out / 'density_rho.csv'} and {out / 'density_p.csv'}\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--paths", type=int, help="number of Monte Carlo paths")
    common.add_argument("--steps", type=int, help="number of grid nodes")
    common.add_argument("--epsilon", type=float, help="terminal cutoff")
    common.add_argument("--dump-paths", type=int, nargs="?", const=10, default=0,
                        help="write per-path CSV files for the first N paths (default 10)")
    common.add_argument("--only", help="comma-separated subset of tests: " + ", ".join(TESTS))
    p = argparse.ArgumentParser(prog="kyleback", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("validate", "check model assumptions"), ("simulate", "simulate paths"),
                           ("verify", "run the verification battery"), ("sweep", "parameter sweep"),
                           ("density", "tabulate transition densities")):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        if name == "density":
            sp.add_argument("--s", type=float)
            sp.add_argument("--t", type=float)
            sp.add_argument("--range", nargs=2, type=float, metavar=("LO", "HI"))
            sp.add_argument("--points", type=int, default=41)
    return p


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        cfg = apply_overrides(load_config(args.config), args)
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        if args.command == "validate":
            return cmd_validate(cfg)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.dump_paths)
        if args.command == "verify":
            return cmd_verify(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        lo, hi = args.range if args.range else (None, None)
        return cmd_density(cfg, args.s, args.t, lo, hi, args.points)
    except UsageError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except InvalidParameter as exc:
        sys.stderr.write(f"error: invalid configuration: {exc}\n")
        return EXIT_USAGE
    except AssumptionViolation as exc:
        sys.stderr.write(f"assumption violated: {exc}\n")
        return EXIT_FAIL
    except KyleBackError as exc:
        sys.stderr.write(f"failed: {type(exc).__name__}: {exc}\n")
        return EXIT_FAIL
    except (TypeError, ValueError, KeyError) as exc:
        # mistyped config values surface here, e.g. a string where a number is expected
        sys.stderr.write(f"error: invalid configuration: {exc}\n")
        return EXIT_USAGE

if __name__ == "__main__":
    sys.exit(main())
