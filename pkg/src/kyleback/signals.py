"""Example signal models, their equilibrium pricing rules, and the assumption validator.

Three families carry closed forms: Gaussian signals with deterministic
volatility, signals with quadratic volatility on a bounded interval, and
static signals revealed through an arbitrary admissible time change.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Union

import numpy as np
from scipy import integrate

from .core import (AssumptionViolation, Entry, PricingRule, SignalModel, VerificationReport,
                   InvalidParameter, _const, quad)
from .transforms import BridgeKernel

LIMIT_KS = tuple(range(4, 25))
LIMIT_BOUND = 1e-3
RANGE_BOUND = 1e6
DIVERGENCE_RATIO = 0.8
SIGMA1_MARGIN = 1e-9


# ---------------------------------------------------------------------------
# specs

@dataclass(frozen=True)
class DeterministicVolSpec:
    """Gaussian signal ``dZ = Sigma(t) d beta`` with ``Z_0 ~ N(0, q)``."""

    gamma: float = 1.0
    q: float = 0.01
    Sigma: Union[float, Callable[[float], float]] = 0.1


@dataclass(frozen=True)
class QuadraticVolSpec:
    """Signal with volatility ``-delta Z^2 + b Z + d``."""

    gamma: float = 1.0
    delta: float = 0.5
    b: float = 0.0
    d: float = 0.5


@dataclass(frozen=True)
class StaticSpec:
    """Terminal value ``eta_1`` of a base diffusion, revealed along ``eta_{V(t)}``.

    ``base`` is ``"gaussian"`` (``a = 1/(gamma t + C)``) or ``"quadratic"``.
    ``v0 = 1`` gives the constant clock ``V = 1``; ``v0 < 1`` gives the
    linear clock ``V(t) = v0 + (1 - v0) t``.
    """

    base: str = "gaussian"
    gamma: float = 1.0
    C: float = 1.0
    delta: float = 0.5
    b: float = 0.0
    d: float = 0.5
    v0: float = 1.0


# ---------------------------------------------------------------------------
# Gaussian base a = 1 / (gamma t + C)

def gaussian_base(gamma: float, C: float) -> dict:
    """Volatility, derivatives and closed forms of the base ``a = 1/(gamma t + C)``."""
    if not C > 0:
        raise AssumptionViolation(f"C must be positive, got {C!r}")
    g = float(gamma)
    zero = _const(0.0)

    def a(t, x):
        return 1.0 / (g * np.asarray(t, dtype=float) + C) + 0.0 * np.asarray(x, dtype=float)

    def a_t(t, x):
        return -g / (g * np.asarray(t, dtype=float) + C) ** 2 + 0.0 * np.asarray(x, dtype=float)

    def G(s, t):
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        return (t - s) / ((g * s + C) * (g * t + C))

    closed = {
        "v": lambda t, x: (g * np.asarray(t, dtype=float) + C) * np.asarray(x, dtype=float),
        "lam": lambda t, y: np.asarray(y, dtype=float) / (g * np.asarray(t, dtype=float) + C),
        "log_u": lambda t, x: (g * np.asarray(x, dtype=float) ** 2 / (2.0 * (g * np.asarray(t, dtype=float) + C))
                               - 0.5 * np.log((g * np.asarray(t, dtype=float) + C) / C)),
        "eta_var": G,
    }

    def psi(a_, t, x):
        m = np.asarray(a_, dtype=float)
        t = np.asarray(t, dtype=float)
        return ((g * t + C) * (np.asarray(x, dtype=float) - m) ** 2 / 2.0
                + np.log((g + C) / (g * t + C)) / (2.0 * g))

    return dict(a=a, a_x=zero, a_xx=zero, a_t=a_t, closed=closed, psi=psi, G=G,
                interval=(-math.inf, math.inf))


# ---------------------------------------------------------------------------
# quadratic base a = -gamma x^2 + (gamma b / delta) x + gamma d / delta

def quadratic_base(gamma: float, delta: float, b: float, d: float) -> dict:
    if not 0 < abs(delta):
        raise AssumptionViolation("delta must be non-zero")
    if not d / delta > 0:
        raise AssumptionViolation(f"need d/delta > 0, got {d / delta!r}")
    g = float(gamma)
    p1, p0 = g * b / delta, g * d / delta
    disc = math.sqrt(p1 * p1 + 4.0 * g * p0)
    r1, r2 = (p1 - disc) / (2.0 * g), (p1 + disc) / (2.0 * g)
    width = g * (r2 - r1)
    drift0 = p1 / 2.0  # a_x(t, 0) / 2

    def a(t, x):
        x = np.asarray(x, dtype=float)
        return -g * x * x + p1 * x + p0 + 0.0 * np.asarray(t, dtype=float)

    def a_x(t, x):
        return -2.0 * g * np.asarray(x, dtype=float) + p1 + 0.0 * np.asarray(t, dtype=float)

    def a_xx(t, x):
        return -2.0 * g + 0.0 * np.asarray(x, dtype=float) + 0.0 * np.asarray(t, dtype=float)

    zero = _const(0.0)

    def space(x):
        # int_0^x dy / a
        x = np.asarray(x, dtype=float)
        return (np.log1p(-x / r1) - np.log1p(-x / r2)) / width

    def v(t, x):
        return space(x) + drift0 * np.asarray(t, dtype=float)

    def lam(t, y):
        k = width * (np.asarray(y, dtype=float) - drift0 * np.asarray(t, dtype=float))
        # x = r1 r2 (1 - e^k) / (r2 - r1 e^k), evaluated without overflow
        with np.errstate(over="ignore"):
            pos = k > 0
            e = np.exp(np.where(pos, -k, k))
            num = np.where(pos, e - 1.0, 1.0 - e)
            den = np.where(pos, r2 * e - r1, r2 - r1 * e)
        out = r1 * r2 * num / den
        return float(out) if np.ndim(out) == 0 else out

    def zoa(x):
        # antiderivative of z / a
        x = np.asarray(x, dtype=float)
        return (r1 * np.log(x - r1) - r2 * np.log(r2 - x)) / width

    def ooa(x):
        # antiderivative of 1 / a
        x = np.asarray(x, dtype=float)
        return (np.log(x - r1) - np.log(r2 - x)) / width

    def time_integrand(s):
        l0 = float(lam(s, 0.0))
        return 0.5 * g * float(a(s, l0)) + 0.5 * g * g * l0 * l0

    @lru_cache(maxsize=8192)
    def time_part(t):
        if b == 0:
            return 0.5 * g * p0 * t
        return quad(time_integrand, 0.0, t)

    log_r2, log_mr1 = math.log(r2), math.log(-r1)

    def lam_integral(t, y):
        # antiderivative in y of lam(t, y); stays finite where lam rounds to an endpoint
        k = width * (np.asarray(y, dtype=float) - drift0 * np.asarray(t, dtype=float))
        return (r1 * k + (r2 - r1) * np.logaddexp(log_r2, log_mr1 + k)) / width

    def log_u(t, x):
        t_arr = np.asarray(t, dtype=float)
        tp = np.vectorize(lambda s: time_part(float(s)), otypes=[float])(t_arr)
        out = g * (lam_integral(t_arr, x) - lam_integral(t_arr, 0.0)) - tp
        return float(out) if np.ndim(out) == 0 else out

    def psi(a_, t, x):
        m = np.asarray(a_, dtype=float)
        x = np.asarray(x, dtype=float)
        space_part = (zoa(x) - zoa(m)) - m * (ooa(x) - ooa(m))
        return space_part + 0.5 * (1.0 - np.asarray(t, dtype=float)) * a(0.0, m)

    closed = {"v": v, "lam": lam, "log_u": log_u}
    return dict(a=a, a_x=a_x, a_xx=a_xx, a_t=zero, closed=closed, psi=psi,
                interval=(r1, r2), roots=(r1, r2))


# ---------------------------------------------------------------------------
# pricing rules

def equilibrium_rule(model: SignalModel, psi: Optional[Callable] = None) -> PricingRule:
    """Equilibrium rule ``w = a``, ``c = 0``; the block-trade map coincides with ``v``."""
    closed = {}
    if "v" in model.closed and "lam" in model.closed:
        closed["K"] = model.closed["v"]
        closed["K_inv"] = model.closed["lam"]
    if psi is not None:
        closed["psi"] = psi
    derivs = {}
    if model.exact_derivatives:
        derivs = dict(w_x=model.a_x, w_xx=model.a_xx, w_t=model.a_t)
    return PricingRule(w=model.a, c=0.0, closed=closed, interval=model.interval,
                       label=f"equilibrium[{model.kind}]", **derivs)


# ---------------------------------------------------------------------------
# constructors

def _sigma_fn(Sigma) -> tuple[Callable, Callable]:
    """Return ``Sigma(t)`` and ``S(t) = int_0^t Sigma^2``."""
    if callable(Sigma):
        @lru_cache(maxsize=8192)
        def S_scalar(t):
            return quad(lambda s: float(Sigma(s)) ** 2, 0.0, t)

        S_vec = np.vectorize(lambda t: S_scalar(float(t)), otypes=[float])

        def S(t):
            out = S_vec(t)
            return float(out) if np.ndim(out) == 0 else out

        sig = np.vectorize(lambda t: float(Sigma(t)), otypes=[float])
        return (lambda t: sig(t) if np.ndim(t) else float(Sigma(t))), S
    value = float(Sigma)
    return _const(value), (lambda t: value * value * np.asarray(t, dtype=float) if np.ndim(t)
                           else value * value * float(t))


@dataclass(frozen=True)
class GaussianOracle:
    """Closed forms of the deterministic-volatility equilibrium."""

    gamma: float
    C: float
    q: float
    S: Callable = field(repr=False)
    V: Callable = field(repr=False)
    psi: Callable = field(repr=False)

    def G(self, s, t):
        return (np.asarray(t) - s) / ((self.gamma * np.asarray(s) + self.C) * (self.gamma * np.asarray(t) + self.C))

    def rho(self, s, y, t, x):
        var = self.G(s, t)
        return np.exp(-(np.asarray(x) - y) ** 2 / (2.0 * var)) / np.sqrt(2.0 * math.pi * var)

    def v(self, t, x):
        return (self.gamma * np.asarray(t) + self.C) * np.asarray(x)

    def lam(self, t, y):
        return np.asarray(y) / (self.gamma * np.asarray(t) + self.C)

    def u(self, t, x):
        gt = self.gamma * np.asarray(t) + self.C
        return np.exp(self.gamma * np.asarray(x) ** 2 / (2.0 * gt)) * np.sqrt(self.C / gt)

    def alpha(self, t, xi, z):
        Vt = self.V(t)
        return (np.asarray(z) - xi) * (self.gamma * Vt + self.C) / (Vt - np.asarray(t))


def build_deterministic(spec: DeterministicVolSpec, check_grid: int = 1000):
    """Signal model, equilibrium rule and closed-form oracle of the Gaussian family.

    Raises:
        AssumptionViolation: if ``C`` is not positive, the standing inequality
            ``q + S(t) > t / (C (C + gamma t))`` fails on the check grid, or
            ``Sigma(1)`` equals the excluded value.
    """
    g, q = float(spec.gamma), float(spec.q)
    if not g > 0:
        raise AssumptionViolation(f"risk aversion gamma must be > 0, got {g!r}")
    if q < 0:
        raise AssumptionViolation(f"initial variance q must be >= 0, got {q!r}")
    Sigma, S = _sigma_fn(spec.Sigma)
    total = q + S(1.0)
    if not total > 0:
        raise AssumptionViolation("total signal variance q + int Sigma^2 must be positive")
    C = (-g + math.sqrt(g * g + 4.0 / total)) / 2.0
    if not C > 0:
        raise AssumptionViolation(f"C = {C!r} is not positive")

    t = np.arange(check_grid) / check_grid
    lhs = q + np.array([S(float(s)) for s in t])
    rhs = t / (C * (C + g * t))
    bad = np.flatnonzero(~(lhs > rhs))
    if bad.size:
        t_bad = float(t[bad[0]])
        raise AssumptionViolation(
            f"standing inequality q + int_0^t Sigma^2 > t/(C(C+gamma t)) fails at t={t_bad:g} "
            f"({lhs[bad[0]]:.6g} <= {rhs[bad[0]]:.6g})")
    excluded = 1.0 / C - g * q - g * S(1.0)
    if abs(float(Sigma(1.0)) - excluded) <= SIGMA1_MARGIN:
        raise AssumptionViolation(f"Sigma(1) equals the excluded value {excluded:.12g}")

    def denom(t):
        return 1.0 / C - g * q - g * S(t)

    def V(t):
        out = 1.0 / (g * denom(t)) - C / g
        return out

    def sigma(t):
        return Sigma(t) / denom(t)

    base = gaussian_base(g, C)
    closed = dict(base["closed"])
    closed["signal_var"] = lambda s, t: S(t) - S(s)
    model = SignalModel(gamma=g, a=base["a"], sigma=sigma, V=V, interval=base["interval"],
                        a_x=base["a_x"], a_xx=base["a_xx"], a_t=base["a_t"],
                        kind="deterministic", closed=closed,
                        params={"gamma": g, "q": q, "C": C,
                                "Sigma": float(spec.Sigma) if not callable(spec.Sigma) else float("nan")})
    rule = equilibrium_rule(model, psi=base["psi"])
    oracle = GaussianOracle(gamma=g, C=C, q=q, S=S, V=V, psi=base["psi"])
    return model, rule, oracle


def build_quadratic(spec: QuadraticVolSpec):
    """Signal model and equilibrium rule of the quadratic-volatility family."""
    g, delta = float(spec.gamma), float(spec.delta)
    if not g > 0:
        raise AssumptionViolation(f"risk aversion gamma must be > 0, got {g!r}")
    if not 0 < abs(delta) < g:
        raise AssumptionViolation(f"need 0 < |delta| < gamma, got delta={delta!r}, gamma={g!r}")
    base = quadratic_base(g, delta, spec.b, spec.d)
    ratio = delta * delta / (g * g)
    t0 = 1.0 - ratio

    def V(t):
        return t0 + ratio * np.asarray(t, dtype=float) if np.ndim(t) else t0 + ratio * float(t)

    model = SignalModel(gamma=g, a=base["a"], sigma=_const(abs(delta) / g), V=V,
                        interval=base["interval"], a_x=base["a_x"], a_xx=base["a_xx"],
                        a_t=base["a_t"], kind="quadratic", closed=base["closed"],
                        params={"gamma": g, "delta": delta, "b": float(spec.b), "d": float(spec.d),
                                "t0": t0})
    return model, equilibrium_rule(model, psi=base["psi"])


def build_static(spec: StaticSpec, V_choice: Optional[tuple[Callable, Callable]] = None):
    """Static signal ``eta_1`` revealed along a time change.

    Args:
        spec: base model and default clock.
        V_choice: optional ``(V, sigma)`` pair overriding ``spec.v0``; must have
            ``V(1) = 1`` and ``V(t) > t`` (checked by the validator).
    """
    g = float(spec.gamma)
    if not g > 0:
        raise AssumptionViolation(f"risk aversion gamma must be > 0, got {g!r}")
    if spec.base == "gaussian":
        base = gaussian_base(g, float(spec.C))
    elif spec.base == "quadratic":
        base = quadratic_base(g, float(spec.delta), float(spec.b), float(spec.d))
    else:
        raise InvalidParameter(f"unknown static base {spec.base!r}")
    if V_choice is not None:
        V, sigma = V_choice
    else:
        v0 = float(spec.v0)
        if not 0.0 <= v0 <= 1.0:
            raise AssumptionViolation(f"v0 must lie in [0, 1], got {v0!r}")
        if v0 == 1.0:
            V, sigma = _const(1.0), _const(0.0)
        else:
            V = lambda t: v0 + (1.0 - v0) * (np.asarray(t, dtype=float) if np.ndim(t) else float(t))
            sigma = _const(math.sqrt(1.0 - v0))
    model = SignalModel(gamma=g, a=base["a"], sigma=sigma, V=V, interval=base["interval"],
                        a_x=base["a_x"], a_xx=base["a_xx"], a_t=base["a_t"], kind="static",
                        closed=base["closed"],
                        params={"gamma": g, "base": spec.base, "C": float(spec.C),
                                "delta": float(spec.delta), "b": float(spec.b), "d": float(spec.d),
                                "v0": float(V(0.0))})
    return model, equilibrium_rule(model, psi=base["psi"])


def build_custom(gamma: float, a: Callable, sigma: Callable, V: Callable,
                 interval=(-math.inf, math.inf), **derivatives):
    """Model with user-supplied coefficients; derivatives not given are finite-differenced."""
    model = SignalModel(gamma=gamma, a=a, sigma=sigma, V=V, interval=interval, kind="custom",
                        **derivatives)
    return model, equilibrium_rule(model)


# ---------------------------------------------------------------------------
# limit condition

def limit_sequence(V: Callable, sigma: Callable, ks=LIMIT_KS) -> np.ndarray:
    """``D^2 Lambda log Lambda`` at ``t = 1 - 2^-k``.

    Integrates ``M = D^2 Lambda`` through ``M' = 1 + sigma^2 - 2 M / (V - t)``
    together with ``log D``, which stays finite where ``D`` and ``1/D^2``
    under- or overflow.
    """
    def rhs(t, y):
        gap = float(V(t)) - t
        s2 = float(sigma(t)) ** 2
        return [-1.0 / gap, 1.0 + s2 - 2.0 * y[1] / gap]

    t_eval = 1.0 - 2.0 ** -np.asarray(ks, dtype=float)
    sol = integrate.solve_ivp(rhs, (0.0, float(t_eval[-1])), [0.0, 0.0], method="Radau",
                              t_eval=t_eval, rtol=1e-10, atol=1e-14)
    if not sol.success:
        raise AssumptionViolation(f"limit-condition integration failed: {sol.message}")
    log_d, M = sol.y
    log_lam = np.log(M) - 2.0 * log_d
    return M * log_lam


# ---------------------------------------------------------------------------
# validator

def _state_samples(interval, n: int = 41) -> np.ndarray:
    lo, hi = interval
    if math.isinf(lo) and math.isinf(hi):
        return np.linspace(-3.0, 3.0, n)
    lo_f = lo if not math.isinf(lo) else -3.0
    hi_f = hi if not math.isinf(hi) else 3.0
    return lo_f + (hi_f - lo_f) * np.linspace(0.02, 0.98, n)


def _pde_residual(f, f_t, f_xx, gamma, T, X) -> float:
    val = f(T, X)
    return float(np.max(np.abs(f_t(T, X) / val ** 2 + 0.5 * f_xx(T, X) + gamma)))


def _diverges(kernel: BridgeKernel, t: float, end: float, sign: int) -> bool:
    values = []
    for k in range(1, 61):
        x = sign * 2.0 ** (k - 1) if math.isinf(end) else end * (1.0 - 2.0 ** -k)
        try:
            val = float(kernel.v(t, x))
        except Exception:
            break
        if not math.isfinite(val) or abs(val) > RANGE_BOUND:
            return True
        values.append(val)
    inc = np.abs(np.diff(values))
    if inc.size < 6:
        return False
    ratios = inc[-5:] / np.maximum(inc[-6:-1], 1e-300)
    return bool(np.all(ratios >= DIVERGENCE_RATIO))


def validate_assumptions(model: SignalModel, rule: PricingRule, n_grid: int = 41,
                         epsilon: float = 2.0 ** -20) -> VerificationReport:
    """Check the standing assumptions on a signal model and the admissibility of a rule.

    Failures are reported as entries, never raised.
    """
    rep = VerificationReport(meta={"kind": model.kind, "rule": rule.label})
    g = model.gamma
    ts = np.linspace(0.0, 1.0, n_grid)
    xs = _state_samples(model.interval, n_grid)
    T, X = np.meshgrid(ts, xs, indexing="ij")
    tol_a = 1e-10 if model.exact_derivatives else 1e-5
    tol_w = 1e-10 if rule.exact_derivatives else 1e-5

    def safe(name, fn, **kw):
        try:
            return fn()
        except Exception as exc:  # a broken model yields a failed entry
            rep.add(Entry(name, float("nan"), meta={"error": f"{type(exc).__name__}: {exc}"}, **kw))
            return None

    a_min = safe("a_positive", lambda: float(np.min(model.a(T, X))), sided="gt")
    if a_min is not None:
        rep.add(Entry("a_positive", a_min, 0.0, sided="gt"))
    res = safe("a_pde_residual", lambda: _pde_residual(model.a, model.a_t, model.a_xx, g, T, X),
               sided="max", tolerance=tol_a)
    if res is not None:
        rep.add(Entry("a_pde_residual", res, 0.0, tol_a, sided="max"))

    kernel = BridgeKernel(model)
    lo, hi = model.interval
    probes = [(t, end, s) for t in (0.0, 0.5, 1.0) for end, s in ((lo, -1), (hi, 1))]
    n_div = sum(_diverges(kernel, t, end, s) for t, end, s in probes)
    rep.add(Entry("v_range", n_div / len(probes), 1.0, sided="min",
                  meta={"bound": RANGE_BOUND, "ratio": DIVERGENCE_RATIO}))

    if model.kind != "static":
        s_min = safe("sigma_min", lambda: float(np.min(np.vectorize(lambda t: float(model.sigma(t)))(ts))),
                     sided="gt")
        if s_min is not None:
            rep.add(Entry("sigma_min", s_min, 0.0, sided="gt"))

    rep.add(Entry("V_terminal", float(model.V(1.0)), 1.0, 1e-9))
    tt = np.linspace(0.0, 1.0 - epsilon, 4 * n_grid)
    gap = np.array([float(model.V(t)) - t for t in tt])
    rep.add(Entry("V_gap", float(np.min(gap)), 0.0, sided="gt"))

    seq = safe("limit_condition", lambda: limit_sequence(model.V, model.sigma), sided="lt",
               target=LIMIT_BOUND)
    if seq is not None:
        rises = int(np.sum(np.diff(np.abs(seq)) > 0))
        rep.add(Entry("limit_condition", abs(float(seq[-1])), LIMIT_BOUND, sided="lt",
                      meta={"k": list(LIMIT_KS), "values": seq.tolist()}))
        rep.add(Entry("limit_monotone", rises, 0.0, sided="max"))

    w_min = safe("w_positive", lambda: float(np.min(rule.w(T, X))), sided="gt")
    if w_min is not None:
        rep.add(Entry("w_positive", w_min, 0.0, sided="gt"))
    res = safe("w_pde_residual", lambda: _pde_residual(rule.w, rule.w_t, rule.w_xx, g, T, X),
               sided="max", tolerance=tol_w)
    if res is not None:
        rep.add(Entry("w_pde_residual", res, 0.0, tol_w, sided="max"))
    return rep
