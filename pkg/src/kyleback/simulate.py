"""Joint simulation of signal, price, order flow and insider position.

The default scheme integrates in scale coordinates, where the equilibrium
price state is a bridge toward the transformed signal::

    dU = sigma dbeta + gamma sigma^2 lam(V, U) dt,     Z  = lam(V(t), U)
    dR = dB + (alpha + gamma xi) dt,                   xi = lam(t, R)

so the equilibrium rate ``alpha = (U - R)/(V - t) - gamma xi`` turns R into a
Brownian bridge pulled toward U.  Several strategies share one pass over the
noise (common random numbers); only a few checkpoints are stored per path.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (BLOCK_SIZE, DEFAULT_EPSILON, DEFAULT_STEPS, STREAM_INIT, STREAM_RETRY,
                   STREAM_STEPS, STREAM_TERMINAL, InconsistentBundle, InvalidParameter,
                   PathBundle, PricingRule, RngContract, SignalModel, StepResolution, make_grid)
from .transforms import BridgeKernel, jump_update

EXPLOSION_BOUND = 1e6
# (U - R)^2 / (2 (V - t)) above this means rho < 1e-300
UNDERFLOW_EXPONENT = 690.0
RETRY_SUBSTEPS = 16
CHUNK_STEPS = 256
INIT_STEPS = 1024
DEFAULT_RECORD = (0.0, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875)
WORKERS_ENV = "KYLEBACK_WORKERS"
SCHEMES = ("auto", "transformed", "euler", "exact-gaussian")


@dataclass(frozen=True)
class Strategy:
    """Insider trading strategy: a rate ``alpha`` plus scheduled block trades.

    ``kind`` is one of ``equilibrium``, ``scaled``, ``zero``, ``jump`` or
    ``custom``.  A ``jump`` strategy trades at ``base`` rate (equilibrium by
    default) and adds the blocks in ``jumps``.
    """

    kind: str = "equilibrium"
    kappa: float = 1.0
    jumps: tuple = ()
    drift: Optional[Callable] = None
    base: str = "equilibrium"

    def __post_init__(self):
        if self.kind not in ("equilibrium", "scaled", "zero", "jump", "custom"):
            raise InvalidParameter(f"unknown strategy kind {self.kind!r}")
        if self.kind == "equilibrium" and self.jumps:
            raise InvalidParameter("the equilibrium strategy has no block trades")
        if self.kind == "custom" and self.drift is None and not self.jumps:
            raise InvalidParameter("custom strategy needs a drift or jumps")
        object.__setattr__(self, "jumps", tuple((float(t), float(s)) for t, s in self.jumps))

    @classmethod
    def equilibrium(cls) -> "Strategy":
        return cls("equilibrium")

    @classmethod
    def scaled(cls, kappa: float) -> "Strategy":
        return cls("scaled", kappa=float(kappa))

    @classmethod
    def zero(cls) -> "Strategy":
        return cls("zero", kappa=0.0)

    @classmethod
    def jump(cls, time: float, size: float, base: str = "equilibrium") -> "Strategy":
        if base not in ("equilibrium", "zero"):
            raise InvalidParameter(f"jump base must be equilibrium or zero, got {base!r}")
        return cls("jump", kappa=1.0 if base == "equilibrium" else 0.0, jumps=((time, size),), base=base)

    @classmethod
    def custom(cls, drift: Optional[Callable] = None, jumps: Sequence = ()) -> "Strategy":
        return cls("custom", kappa=0.0, drift=drift, jumps=tuple(jumps))

    @property
    def label(self) -> str:
        if self.kind == "scaled":
            return f"scaled({self.kappa:g})"
        if self.kind == "jump":
            inner = ",".join(f"{t:g},{s:g}" for t, s in self.jumps)
            return f"jump({inner})" if self.base == "equilibrium" else f"jump({inner};zero)"
        return self.kind

    @property
    def uses_equilibrium_rate(self) -> bool:
        return self.kind != "custom" and self.kappa != 0.0


@dataclass
class SimConfig:
    n_paths: int = 1000
    n_steps: int = DEFAULT_STEPS
    epsilon: float = DEFAULT_EPSILON
    seed: int = 0
    scheme: str = "auto"
    refinement: str = "geometric"
    record_times: Sequence[float] = DEFAULT_RECORD
    record_all: bool = False
    init_steps: int = INIT_STEPS
    workers: Optional[int] = None

    def __post_init__(self):
        if int(self.n_paths) < 1:
            raise InvalidParameter("n_paths must be >= 1")
        if self.scheme not in SCHEMES:
            raise InvalidParameter(f"scheme must be one of {SCHEMES}")
        self.n_paths = int(self.n_paths)
        if self.workers is None:
            self.workers = int(os.environ.get(WORKERS_ENV, "1"))

    @property
    def grid(self):
        return make_grid(self.epsilon, self.n_steps, self.refinement)


# ---------------------------------------------------------------------------
# internals

@dataclass
class _Context:
    model: SignalModel
    rule: PricingRule
    kernel: BridgeKernel
    strategies: list
    scheme: str
    grid: object
    rng: RngContract
    record_index: np.ndarray
    init_steps: int
    nodes: np.ndarray = field(init=False)
    dt: np.ndarray = field(init=False)
    Vn: np.ndarray = field(init=False)
    sig: np.ndarray = field(init=False)
    jump_plan: dict = field(init=False)

    def __post_init__(self):
        self.nodes = self.grid.nodes
        self.dt = np.diff(self.nodes)
        self.Vn = np.array([float(self.model.V(t)) for t in self.nodes])
        self.sig = np.array([float(self.model.sigma(t)) for t in self.nodes])
        if np.any(self.Vn - self.nodes <= 0):
            raise StepResolution("V(t) - t must stay positive on the grid")
        plan: dict = {}
        for s, strat in enumerate(self.strategies):
            for t_j, size in strat.jumps:
                if not 0.0 <= t_j <= self.grid.end:
                    raise InvalidParameter(f"jump time {t_j} outside [0, {self.grid.end}]")
                k = self.grid.first_at_or_after(t_j)
                plan.setdefault(k, []).append((s, size))
        self.jump_plan = plan
        if self.scheme == "exact-gaussian":
            if "signal_var" not in self.model.closed:
                raise InvalidParameter("exact-gaussian scheme needs a Gaussian signal with known increments")
            sv = self.model.closed["signal_var"]
            self.dS = np.array([sv(a, b) for a, b in zip(self.nodes[:-1], self.nodes[1:])])
            self.dS_end = float(sv(self.nodes[-1], 1.0))


def _resolve_scheme(model: SignalModel, rule: PricingRule, scheme: str) -> str:
    same_rule = rule.w is model.a and rule.c == 0.0
    if scheme == "auto":
        return "transformed" if same_rule else "euler"
    if scheme in ("transformed", "exact-gaussian") and not same_rule:
        raise InvalidParameter(f"{scheme} scheme needs the equilibrium rule w = a, c = 0; use euler")
    return scheme


def _sample_initial(ctx: _Context, block: int, m: int) -> np.ndarray:
    """Initial transformed signal ``U_0 = v(V(0), eta_{V(0)})``."""
    model, kernel = ctx.model, ctx.kernel
    v0 = float(ctx.Vn[0])
    rng = ctx.rng.stream(block, STREAM_INIT)
    if v0 == 0.0:
        return np.zeros(m)
    if "eta_var" in model.closed:
        z0 = math.sqrt(float(model.closed["eta_var"](0.0, v0))) * rng.standard_normal(BLOCK_SIZE)[:m]
        return np.asarray(kernel.v(v0, z0), dtype=float)
    # base diffusion in scale coordinates: d kappa = d beta + gamma lam(s, kappa) ds
    n = ctx.init_steps
    h = v0 / n
    kappa = np.zeros(m)
    g = model.gamma
    for i in range(n):
        noise = rng.standard_normal(BLOCK_SIZE)[:m]
        kappa = kappa + math.sqrt(h) * noise + g * np.asarray(kernel.lam(i * h, kappa)) * h
    return kappa


def _bridge_split(rng, total: np.ndarray, h: float, parts: int) -> np.ndarray:
    """Brownian increments on ``parts`` sub-steps conditioned on their sum."""
    inc = math.sqrt(h / parts) * rng.standard_normal((parts, total.size))
    inc += (total - inc.sum(axis=0)) / parts
    return inc


class _Block:
    """State of one block of paths for all strategies."""

    def __init__(self, ctx: _Context, block: int, m: int):
        self.ctx, self.block, self.m = ctx, block, m
        ns = len(ctx.strategies)
        n_rec = len(ctx.record_index)
        self.ns = ns
        self.rec = {name: np.full((ns, m, n_rec), np.nan) for name in ("xi", "Y", "theta")}
        self.rec_B = np.zeros((m, n_rec))
        self.rec_beta = np.zeros((m, n_rec))
        self.rec_Z = np.zeros((m, n_rec))
        self.B = np.zeros(m)
        self.beta = np.zeros(m)
        self.theta = np.zeros((ns, m))
        self.ito = np.zeros((ns, m))
        self.ibp = np.zeros((ns, m))
        self.stoch = np.zeros((ns, m))
        self.psq = np.zeros((ns, m))
        self.failed = np.zeros((ns, m), dtype=bool)
        self.sig_failed = np.zeros(m, dtype=bool)
        n_j = max((len(s.jumps) for s in ctx.strategies), default=0)
        self.xi_before = np.full((ns, m, n_j), np.nan)
        self.xi_after = np.full((ns, m, n_j), np.nan)
        self.jump_count = np.zeros(ns, dtype=int)
        self.errors: list = []
        self.any_failed = False
        self.retry_rng = ctx.rng.stream(block, STREAM_RETRY)

    def fail(self, s: Optional[int], mask: np.ndarray, reason: str, t: float):
        if not np.any(mask):
            return
        if s is None:
            new = mask & ~self.sig_failed
            self.sig_failed |= mask
            self.failed |= mask[None, :]
            label = "signal"
        else:
            new = mask & ~self.failed[s]
            self.failed[s] |= mask
            label = self.ctx.strategies[s].label
        if np.any(new):
            self.any_failed = True
            self.errors.append({"block": self.block, "strategy": label, "reason": reason,
                                "t": float(t), "count": int(np.sum(new))})


def _noise_chunks(ctx: _Context, block: int, m: int):
    rng = ctx.rng.stream(block, STREAM_STEPS)
    n_steps = len(ctx.dt)
    for start in range(0, n_steps, CHUNK_STEPS):
        size = min(CHUNK_STEPS, n_steps - start)
        z = rng.standard_normal((size, 2, BLOCK_SIZE))[:, :, :m]
        for i in range(size):
            yield z[i, 0], z[i, 1]


def _rate(ctx: _Context, s: int, t: float, xi: np.ndarray, Z: np.ndarray, eq: np.ndarray) -> np.ndarray:
    strat = ctx.strategies[s]
    if strat.kind == "custom":
        return np.asarray(strat.drift(t, xi, Z), dtype=float) * np.ones_like(xi) if strat.drift else np.zeros_like(xi)
    if strat.kappa == 0.0:
        return np.zeros_like(xi)
    return strat.kappa * eq


def _run_block(ctx: _Context, block: int, m: int) -> dict:
    if ctx.scheme == "euler":
        return _run_block_euler(ctx, block, m)
    return _run_block_transformed(ctx, block, m)


def _record(st: _Block, j: int, xi: np.ndarray, Z: np.ndarray):
    st.rec_B[:, j] = st.B
    st.rec_beta[:, j] = st.beta
    st.rec_Z[:, j] = Z
    st.rec["xi"][:, :, j] = xi
    st.rec["theta"][:, :, j] = st.theta
    st.rec["Y"][:, :, j] = st.theta + st.B[None, :]


def _apply_jumps_transformed(st: _Block, k: int, R: np.ndarray, xi: np.ndarray):
    ctx = st.ctx
    t = ctx.nodes[k]
    for s, size in ctx.jump_plan.get(k, []):
        j = st.jump_count[s]
        before = xi[s].copy()
        R[s] = R[s] + size  # K_w = v under the equilibrium rule
        after = np.asarray(ctx.kernel.lam(t, R[s]), dtype=float)
        st.ito[s] += st.theta[s] * (after - before)
        st.theta[s] += size
        st.ibp[s] += (after + ctx.rule.c) * size
        st.xi_before[s, :, j] = before
        st.xi_after[s, :, j] = after
        st.jump_count[s] += 1
        xi[s] = after


def _run_block_transformed(ctx: _Context, block: int, m: int) -> dict:
    st = _Block(ctx, block, m)
    model, kernel = ctx.model, ctx.kernel
    g = model.gamma
    lam = kernel.lam
    c = ctx.rule.c
    exact = ctx.scheme == "exact-gaussian"
    strategies = ctx.strategies
    kappa = np.array([0.0 if s.kind == "custom" else s.kappa for s in strategies])[:, None]
    custom = [i for i, s in enumerate(strategies) if s.kind == "custom" and s.drift is not None]
    exact_rows = [i for i, s in enumerate(strategies) if exact and s.kind == "equilibrium"]
    pulled = np.array([s.uses_equilibrium_rate for s in strategies])
    finite_interval = not all(math.isinf(b) for b in model.interval)
    lo, hi = model.interval

    U = _sample_initial(ctx, block, m)
    Z = np.asarray(lam(ctx.Vn[0], U), dtype=float)
    R = np.zeros((st.ns, m))
    xi = np.asarray(lam(0.0, R), dtype=float) * np.ones((st.ns, m))
    rec_pos = {int(k): j for j, k in enumerate(ctx.record_index)}
    noise = _noise_chunks(ctx, block, m)
    n_nodes = len(ctx.nodes)
    with np.errstate(all="ignore"):
        for k in range(n_nodes):
            t = ctx.nodes[k]
            if k in ctx.jump_plan:
                _apply_jumps_transformed(st, k, R, xi)
            if k in rec_pos:
                _record(st, rec_pos[k], xi, Z)
            if k == n_nodes - 1:
                break
            h = ctx.dt[k]
            gap = ctx.Vn[k] - t
            nB, nb = next(noise)
            sq = math.sqrt(h)
            dB = sq * nB
            # price-dependent accumulators use left-point values
            P = xi + c if c else xi
            st.stoch += P * dB
            st.psq += (P * P) * h
            alpha = (U - R) / gap
            alpha -= g * xi
            alpha *= kappa
            for i in custom:
                alpha[i] = strategies[i].drift(t, xi[i], Z)
            dtheta = alpha * h
            drift = dtheta + (g * h) * xi
            drift += dB
            R_new = R + drift
            for i in exact_rows:
                R_new[i] = U + (R[i] - U) * math.exp(-h / gap) + dB
                dtheta[i] = R_new[i] - R[i] - dB - g * h * xi[i]
            st.ibp += P * dtheta
            xi_new = np.asarray(lam(ctx.nodes[k + 1], R_new), dtype=float)
            st.ito += st.theta * (xi_new - xi)
            st.theta += dtheta
            # signal step
            if exact:
                Z = Z + math.sqrt(ctx.dS[k]) * nb
                U = np.asarray(kernel.v(ctx.Vn[k + 1], Z), dtype=float)
            else:
                sk = ctx.sig[k]
                if sk != 0.0:
                    U = U + (sk * sq) * nb + (g * sk * sk * h) * Z
                    Z = np.asarray(lam(ctx.Vn[k + 1], U), dtype=float)
                elif ctx.Vn[k + 1] != ctx.Vn[k]:
                    Z = np.asarray(lam(ctx.Vn[k + 1], U), dtype=float)
            st.B += dB
            st.beta += sq * nb
            R, xi = R_new, xi_new
            # path-error monitors, checked cheaply and resolved only when triggered
            t1 = ctx.nodes[k + 1]
            gap1 = ctx.Vn[k + 1] - t1
            spread = np.abs(U - R)
            worst = max(float(np.max(np.abs(R))), float(np.max(np.abs(U))))
            if not worst <= EXPLOSION_BOUND:
                st.fail(None, ~np.isfinite(U) | (np.abs(U) > EXPLOSION_BOUND), "signal exploded", t1)
                bad = ~np.isfinite(R) | (np.abs(R) > EXPLOSION_BOUND)
                for i in range(st.ns):
                    st.fail(i, bad[i], "price state exploded", t1)
            limit = math.sqrt(2.0 * UNDERFLOW_EXPONENT * gap1)
            if float(np.max(spread[pulled], initial=0.0)) > limit:
                for i in np.flatnonzero(pulled):
                    st.fail(i, spread[i] > limit, "conditional density underflow", t1)
            if finite_interval:
                st.fail(None, ~((Z > lo) & (Z < hi)), "signal left the state interval", t1)
                out = ~((xi > lo) & (xi < hi))
                for i in range(st.ns):
                    st.fail(i, out[i], "price state left the state interval", t1)
            if st.any_failed:
                # park failed paths at a harmless state
                R = np.where(st.failed, 0.0, R)
                xi = np.where(st.failed, np.asarray(lam(t1, 0.0)), xi)
                U = np.where(st.sig_failed, 0.0, U)
                Z = np.where(st.sig_failed, np.asarray(lam(ctx.Vn[k + 1], 0.0)), Z)
        # one extra signal step to t = 1
        rng = ctx.rng.stream(block, STREAM_TERMINAL)
        nz = rng.standard_normal(BLOCK_SIZE)[:m]
        h_end = 1.0 - ctx.nodes[-1]
        if exact:
            Z1 = Z + math.sqrt(ctx.dS_end) * nz
        else:
            sk = ctx.sig[-1]
            U1 = U + sk * math.sqrt(h_end) * nz + g * sk * sk * Z * h_end
            Z1 = np.asarray(lam(1.0, U1), dtype=float)
    return _finish_block(st, xi, Z, Z1, U)


def _finish_block(st: _Block, xi, Z, Z1, U) -> dict:
    c = st.ctx.rule.c
    wealth = st.ito + (Z1[None, :] - xi - c) * st.theta
    wealth_ibp = Z1[None, :] * st.theta - st.ibp
    return dict(rec=st.rec, rec_B=st.rec_B, rec_beta=st.rec_beta, rec_Z=st.rec_Z, Z1=Z1,
                wealth=wealth, wealth_ibp=wealth_ibp, stoch=st.stoch, psq=st.psq, U_end=U,
                xi_before=st.xi_before, xi_after=st.xi_after, failed=st.failed, errors=st.errors)


# -- direct Euler scheme ----------------------------------------------------------

def _euler_signal_step(ctx, st, k, Z, db, h_sub=None, t_sub=None):
    sk = ctx.sig[k] if t_sub is None else float(ctx.model.sigma(t_sub))
    Vk = ctx.Vn[k] if t_sub is None else float(ctx.model.V(t_sub))
    return Z + sk * ctx.model.a(Vk, Z) * db


def _euler_price_step(ctx, s, t, h, xi, theta, Z, dB):
    """One Euler step of ``d xi = w dY``, ``d theta = alpha dt``; returns increments."""
    eq = np.asarray(ctx.kernel.equilibrium_drift(ctx.rule, t, xi, Z), dtype=float) if \
        ctx.strategies[s].uses_equilibrium_rate else np.zeros_like(xi)
    alpha = _rate(ctx, s, t, xi, Z, eq)
    xi_new = xi + ctx.rule.w(t, xi) * (dB + alpha * h)
    return xi_new, alpha * h


def _run_block_euler(ctx: _Context, block: int, m: int) -> dict:
    st = _Block(ctx, block, m)
    model, rule, kernel = ctx.model, ctx.rule, ctx.kernel
    lo, hi = model.interval
    U0 = _sample_initial(ctx, block, m)
    Z = np.asarray(kernel.lam(ctx.Vn[0], U0), dtype=float)
    xi = np.zeros((st.ns, m))
    rec_pos = {int(k): j for j, k in enumerate(ctx.record_index)}
    noise = _noise_chunks(ctx, block, m)
    n_nodes = len(ctx.nodes)
    inside = lambda x: (x > lo) & (x < hi)
    with np.errstate(all="ignore"):
        for k in range(n_nodes):
            t = ctx.nodes[k]
            for s, size in ctx.jump_plan.get(k, []):
                j = st.jump_count[s]
                ok = ~st.failed[s]
                before = xi[s].copy()
                after = before.copy()
                if np.any(ok):
                    after[ok] = np.asarray(jump_update(rule, t, before[ok], size), dtype=float)
                st.ito[s] += st.theta[s] * (after - before)
                st.theta[s] += size
                st.ibp[s] += (after + rule.c) * size
                st.xi_before[s, :, j] = before
                st.xi_after[s, :, j] = after
                st.jump_count[s] += 1
                xi[s] = after
            if k in rec_pos:
                _record(st, rec_pos[k], xi, Z)
            if k == n_nodes - 1:
                break
            h = ctx.dt[k]
            nB, nb = next(noise)
            dB = math.sqrt(h) * nB
            db = math.sqrt(h) * nb
            # signal
            Z_new = _euler_signal_step(ctx, st, k, Z, db)
            esc = ~inside(Z_new) & ~st.sig_failed
            if np.any(esc):
                idx = np.flatnonzero(esc)
                sub = _bridge_split(st.retry_rng, db[idx], h, RETRY_SUBSTEPS)
                z = Z[idx].copy()
                for i in range(RETRY_SUBSTEPS):
                    ts = t + i * h / RETRY_SUBSTEPS
                    z = _euler_signal_step(ctx, st, k, z, sub[i], t_sub=ts)
                Z_new[idx] = z
                st.fail(None, esc & ~inside(Z_new), "signal left the state interval after retry", t + h)
            # prices
            active = ~st.failed
            P = xi + rule.c
            st.stoch += np.where(active, P * dB[None, :], 0.0)
            st.psq += np.where(active, P * P * h, 0.0)
            for s in range(st.ns):
                ok = active[s]
                if not np.any(ok):
                    continue
                x_new = xi[s].copy()
                dth = np.zeros(m)
                try:
                    x_new[ok], dth[ok] = _euler_price_step(ctx, s, t, h, xi[s][ok], st.theta[s][ok], Z[ok], dB[ok])
                except Exception as exc:  # DensityUnderflow, DomainViolation
                    st.fail(s, ok, f"{type(exc).__name__}: {exc}", t)
                    continue
                esc = ok & ~inside(x_new)
                if np.any(esc):
                    idx = np.flatnonzero(esc)
                    sub = _bridge_split(st.retry_rng, dB[idx], h, RETRY_SUBSTEPS)
                    x = xi[s][idx].copy()
                    th = st.theta[s][idx].copy()
                    ito = np.zeros(idx.size)
                    ibp = np.zeros(idx.size)
                    hs = h / RETRY_SUBSTEPS
                    try:
                        for i in range(RETRY_SUBSTEPS):
                            x2, d = _euler_price_step(ctx, s, t + i * hs, hs, x, th, Z[idx], sub[i])
                            ito += th * (x2 - x)
                            ibp += (x + rule.c) * d
                            th = th + d
                            x = x2
                    except Exception:
                        x = np.full(idx.size, np.nan)
                    # store the sub-stepped result; the regular accumulators below see zero increment
                    st.ito[s][idx] += ito
                    st.ibp[s][idx] += ibp
                    st.theta[s][idx] = th
                    xi[s][idx] = x
                    x_new[idx] = x
                    dth[idx] = 0.0
                    st.fail(s, esc & ~inside(x_new), "price state left the state interval after retry", t + h)
                st.ito[s] += np.where(ok, st.theta[s] * (x_new - xi[s]), 0.0)
                st.ibp[s] += np.where(ok, (xi[s] + rule.c) * dth, 0.0)
                st.theta[s] = st.theta[s] + dth
                xi[s] = np.where(st.failed[s], 0.0, x_new)
                bad = ~np.isfinite(xi[s]) | (np.abs(xi[s]) > EXPLOSION_BOUND)
                st.fail(s, bad, "price state exploded", t + h)
            Z = np.where(st.sig_failed, 0.0, Z_new)
            st.B += dB
            st.beta += db
        rng = ctx.rng.stream(block, STREAM_TERMINAL)
        nz = rng.standard_normal(BLOCK_SIZE)[:m]
        h_end = 1.0 - ctx.nodes[-1]
        sk = ctx.sig[-1]
        Z1 = Z + sk * model.a(ctx.Vn[-1], Z) * math.sqrt(h_end) * nz
        Z1 = np.where(inside(Z1), Z1, Z)
        U_end = np.asarray(kernel.v(ctx.Vn[-1], np.where(st.sig_failed, 0.0, Z)), dtype=float)
    return _finish_block(st, xi, Z, Z1, U_end)


# ---------------------------------------------------------------------------
# public API

def _record_index(grid, record_times, record_all: bool) -> np.ndarray:
    if record_all:
        return np.arange(grid.n_nodes)
    idx = {grid.first_at_or_after(t) for t in record_times if t <= grid.end}
    idx.add(grid.n_nodes - 1)
    return np.array(sorted(idx), dtype=int)


def simulate_many(model: SignalModel, rule: PricingRule, strategies: Sequence[Strategy],
                  cfg: SimConfig, kernel: Optional[BridgeKernel] = None) -> dict:
    """Simulate several strategies on common random numbers.

    Returns:
        dict mapping strategy label to :class:`PathBundle`.
    """
    strategies = list(strategies)
    labels = [s.label for s in strategies]
    if len(set(labels)) != len(labels):
        raise InvalidParameter(f"duplicate strategies: {labels}")
    grid = cfg.grid
    scheme = _resolve_scheme(model, rule, cfg.scheme)
    kernel = kernel or BridgeKernel(model)
    ctx = _Context(model, rule, kernel, strategies, scheme, grid, RngContract(cfg.seed),
                   _record_index(grid, cfg.record_times, cfg.record_all), cfg.init_steps)
    n_blocks = -(-cfg.n_paths // BLOCK_SIZE)
    sizes = [min(BLOCK_SIZE, cfg.n_paths - b * BLOCK_SIZE) for b in range(n_blocks)]
    if cfg.workers > 1 and n_blocks > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            parts = list(pool.map(lambda b: _run_block(ctx, b, sizes[b]), range(n_blocks)))
    else:
        parts = [_run_block(ctx, b, sizes[b]) for b in range(n_blocks)]

    def cat(key, axis):
        return np.concatenate([p[key] for p in parts], axis=axis)

    B, beta, Z, Z1, U_end = cat("rec_B", 0), cat("rec_beta", 0), cat("rec_Z", 0), cat("Z1", 0), cat("U_end", 0)
    xi, Y, theta = (np.concatenate([p["rec"][n] for p in parts], axis=1) for n in ("xi", "Y", "theta"))
    wealth, wealth_ibp = cat("wealth", 1), cat("wealth_ibp", 1)
    stoch, psq, failed = cat("stoch", 1), cat("psq", 1), cat("failed", 1)
    xb, xa = cat("xi_before", 1), cat("xi_after", 1)
    errors = [e for p in parts for e in p["errors"]]
    out = {}
    for s, strat in enumerate(strategies):
        jt = np.array([grid.nodes[grid.first_at_or_after(t)] for t, _ in strat.jumps])
        js = np.array([size for _, size in strat.jumps])
        nj = len(strat.jumps)
        f = failed[s]
        mask = lambda a: np.where(f[:, None] if a.ndim == 2 else f, np.nan, a)
        out[strat.label] = PathBundle(
            grid=grid, record_index=ctx.record_index, B=B, beta=beta, Z=Z, xi=mask(xi[s]), Y=mask(Y[s]),
            theta=mask(theta[s]), Z1=Z1, wealth=mask(wealth[s]), wealth_ibp=mask(wealth_ibp[s]),
            stoch_int=mask(stoch[s]), price_sq_int=mask(psq[s]), U_end=U_end, jump_times=jt,
            jump_sizes=js, xi_before=xb[s][:, :nj], xi_after=xa[s][:, :nj], failed=f.copy(),
            seed=int(cfg.seed), strategy=strat.label, c=rule.c,
            errors=[e for e in errors if e["strategy"] in (strat.label, "signal")])
    return out


def simulate_equilibrium(model: SignalModel, rule: PricingRule, strategy: Optional[Strategy] = None,
                         cfg: Optional[SimConfig] = None, kernel: Optional[BridgeKernel] = None) -> PathBundle:
    strategy = strategy or Strategy.equilibrium()
    cfg = cfg or SimConfig()
    return simulate_many(model, rule, [strategy], cfg, kernel)[strategy.label]


def simulate_signal(model: SignalModel, cfg: SimConfig, rule: Optional[PricingRule] = None):
    """Signal paths only: returns ``(times, Z, Z1)`` with ``Z`` indexed ``[path, record]``."""
    from .signals import equilibrium_rule
    rule = rule or equilibrium_rule(model)
    bundle = simulate_many(model, rule, [Strategy.zero()], cfg)["zero"]
    return bundle.times, bundle.Z, bundle.Z1


def wealth(bundle: PathBundle, rule: PricingRule, model: Optional[SignalModel] = None):
    """Terminal wealth in Ito-sum and integration-by-parts form.

    When every grid node is recorded, both forms are recomputed from the
    stored paths (and block-trade records); otherwise the values accumulated
    during simulation are returned.
    """
    n = bundle.n_paths
    if bundle.wealth.shape != (n,) or bundle.Z1.shape != (n,):
        raise InconsistentBundle("wealth and signal arrays disagree on the number of paths")
    if bundle.xi.shape[1] != len(bundle.record_index):
        raise InconsistentBundle("recorded paths do not match the record index")
    if len(bundle.record_index) != bundle.grid.n_nodes:
        return bundle.wealth, bundle.wealth_ibp
    xi, th, c = bundle.xi, bundle.theta, rule.c
    jumps_at: dict = {}
    for j, t_j in enumerate(bundle.jump_times):
        jumps_at.setdefault(bundle.grid.first_at_or_after(t_j), []).append(j)
    ito = np.zeros(n)
    ibp = np.zeros(n)
    theta_prev = xi_prev = None
    # recorded values are post-trade; block trades carry their own pre/post states
    for k in range(bundle.grid.n_nodes):
        js = jumps_at.get(k, [])
        pre_xi = bundle.xi_before[:, js[0]] if js else xi[:, k]
        pre_theta = th[:, k] - sum(bundle.jump_sizes[j] for j in js)
        if k > 0:
            ito += theta_prev * (pre_xi - xi_prev)
            ibp += (xi_prev + c) * (pre_theta - theta_prev)
        level = pre_theta
        for j in js:
            ito += level * (bundle.xi_after[:, j] - bundle.xi_before[:, j])
            ibp += (bundle.xi_after[:, j] + c) * bundle.jump_sizes[j]
            level = level + bundle.jump_sizes[j]
        theta_prev, xi_prev = th[:, k], xi[:, k]
    ito += (bundle.Z1 - xi[:, -1] - c) * th[:, -1]
    ibp = bundle.Z1 * th[:, -1] - ibp
    return ito, ibp
