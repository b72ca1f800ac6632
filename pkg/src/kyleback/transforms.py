"""Bridge transforms: scale functions, h-function, transition densities,
the equilibrium drift, the block-trade map and the insider's value function.

Every quantity has a closed-form route (when the signal model supplies one)
and a generic route built from adaptive quadrature and bracketed root finding.
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from scipy import optimize

from .core import (DomainViolation, DensityUnderflow, NoConvergence, PricingRule,
                   SignalModel, SingularDrift, InvalidParameter, quad)

LOG_UNDERFLOW = math.log(1e-300)
_LOG_2PI = math.log(2.0 * math.pi)


def _vectorize(fn: Callable) -> Callable:
    vec = np.vectorize(fn, otypes=[float])

    def wrapped(*args):
        out = vec(*args)
        return float(out) if np.ndim(out) == 0 else out
    return wrapped


class IntegratedScale:
    """``S(t, x) = int_0^x dy / f(t, y) + int_0^t f_x(s, 0) / 2 ds`` and its inverse in x.

    With ``f = a`` this is the scale function ``v`` of the signal; with ``f = w``
    it is the block-trade map ``K_w`` of the pricing rule.
    """

    def __init__(self, f, f_x, interval, forward=None, inverse=None, max_iter=200):
        self.f = f
        self.f_x = f_x
        self.interval = tuple(float(b) for b in interval)
        self._forward = forward
        self._inverse = inverse
        self.max_iter = max_iter
        self._time_part = lru_cache(maxsize=4096)(self._time_part_uncached)
        self.forward = forward if forward is not None else _vectorize(self._forward_scalar)
        self.inverse = inverse if inverse is not None else _vectorize(self._inverse_scalar)

    @property
    def closed(self) -> bool:
        return self._forward is not None

    def _time_part_uncached(self, t: float) -> float:
        return quad(lambda s: 0.5 * float(self.f_x(s, 0.0)), 0.0, t)

    def _forward_scalar(self, t: float, x: float) -> float:
        return quad(lambda y: 1.0 / float(self.f(t, y)), 0.0, x) + self._time_part(float(t))

    def _inverse_scalar(self, t: float, y: float) -> float:
        lo_b, hi_b = self.interval

        def g(x):
            return self._forward_scalar(t, x) - y

        g0 = g(0.0)
        if g0 == 0.0:
            return 0.0
        # expand a bracket from 0 toward the endpoint on the side of the root
        end = hi_b if g0 < 0 else lo_b
        inner, outer = 0.0, None
        n_expand = self.max_iter if math.isinf(end) else 52
        for k in range(1, n_expand):
            cand = (2.0 ** (k - 1)) * (1 if g0 < 0 else -1) if math.isinf(end) else end * (1.0 - 2.0 ** -k)
            gc = g(cand)
            if (gc > 0) == (g0 < 0) or gc == 0.0:
                outer = cand
                break
            inner = cand
        if outer is None:
            raise DomainViolation(f"value {y} is outside the range of the map at t={t}")
        lo, hi = sorted((inner, outer))
        try:
            x = optimize.brentq(g, lo, hi, xtol=1e-15, rtol=1e-15, maxiter=self.max_iter)
        except (RuntimeError, ValueError) as exc:
            raise NoConvergence(str(exc)) from exc
        # Newton polish, derivative of the forward map is 1/f
        for _ in range(3):
            step = g(x) * float(self.f(t, x))
            if not lo <= x - step <= hi:
                break
            x -= step
        return float(x)


class BridgeKernel:
    """Transform stack of the weakly conditioned Brownian motion behind the signal.

    Parameters
    ----------
    model : SignalModel
    mode : {"auto", "quadrature"}
        ``auto`` uses the model's closed forms when present; ``quadrature``
        forces the generic numerical route (useful as an independent check).
    """

    def __init__(self, model: SignalModel, mode: str = "auto"):
        if mode not in ("auto", "quadrature"):
            raise InvalidParameter(f"unknown kernel mode {mode!r}")
        self.model = model
        self.gamma = float(model.gamma)
        self.mode = mode
        closed = dict(model.closed) if mode == "auto" else {}
        self._closed = closed
        self.scale = IntegratedScale(model.a, model.a_x, model.interval,
                                     closed.get("v"), closed.get("lam"))
        self._log_u_time = lru_cache(maxsize=4096)(self._log_u_time_uncached)

    # -- scale function and inverse -------------------------------------------------
    def v(self, t, x):
        x_arr = np.asarray(x, dtype=float)
        if not np.all(self.model.contains(x_arr)):
            raise DomainViolation(f"state outside {self.model.interval}")
        return self.scale.forward(t, x)

    def lam(self, t, y):
        return self.scale.inverse(t, y)

    def lam_x(self, t, y):
        # derivative of the inverse is a evaluated at the preimage
        return self.model.a(t, self.lam(t, y))

    # -- h-function -------------------------------------------------------------------
    def _log_u_time_uncached(self, t: float) -> float:
        g = self.gamma

        def integrand(s):
            l0 = float(self.lam(s, 0.0))
            return 0.5 * g * float(self.model.a(s, l0)) + 0.5 * g * g * l0 * l0
        return quad(integrand, 0.0, t)

    def _log_u_scalar(self, t: float, x: float) -> float:
        # int_0^x lam(t, y) dy = int_{lam(t,0)}^{lam(t,x)} z / a(t, z) dz
        lo = float(self.lam(t, 0.0))
        hi = float(self.lam(t, x))
        space = quad(lambda z: z / float(self.model.a(t, z)), lo, hi)
        return self.gamma * space - self._log_u_time(float(t))

    def log_u(self, t, x):
        if "log_u" in self._closed:
            return self._closed["log_u"](t, x)
        return _vectorize(self._log_u_scalar)(t, x)

    def u(self, t, x):
        return np.exp(self.log_u(t, x))

    def u_score(self, t, x):
        """``u_x / u`` which equals ``gamma * lam``."""
        return self.gamma * self.lam(t, x)

    # -- transition densities --------------------------------------------------------
    def log_p(self, s, x, t, y):
        s, x, t, y = (np.asarray(a, dtype=float) for a in (s, x, t, y))
        if np.any(t <= s):
            raise InvalidParameter("density_p requires s < t")
        tau = t - s
        log_gamma = -0.5 * (y - x) ** 2 / tau - 0.5 * (_LOG_2PI + np.log(tau))
        out = self.log_u(t, y) - self.log_u(s, x) + log_gamma
        return float(out) if np.ndim(out) == 0 else out

    def density_p(self, s, x, t, y):
        return np.exp(self.log_p(s, x, t, y))

    def score_p(self, s, x, t, y):
        """Derivative of ``log p`` in the starting point ``x``."""
        return (np.asarray(y) - x) / (np.asarray(t) - s) - self.u_score(s, x)

    def log_rho(self, s, y, t, z):
        """Log transition density of the base diffusion (state coordinates)."""
        z_arr = np.asarray(z, dtype=float)
        out = self.log_p(s, self.v(s, y), t, self.v(t, z)) - np.log(self.model.a(t, z_arr))
        return float(out) if np.ndim(out) == 0 else out

    def density_rho(self, s, y, t, z):
        return np.exp(self.log_rho(s, y, t, z))

    # -- equilibrium -----------------------------------------------------------------
    def equilibrium_drift(self, rule: PricingRule, t, xi, z, check_underflow: bool = False):
        """Insider trading rate ``w * d/dy log rho(t, y, V(t), z)`` at ``y = xi``.

        Evaluated in scale coordinates as
        ``(w / a) * ((v(V, z) - v(t, xi)) / (V - t) - gamma * xi)``.
        """
        t_arr = np.asarray(t, dtype=float)
        Vt = np.asarray(self.model.V(t_arr), dtype=float)
        gap = Vt - t_arr
        if np.any(t_arr >= 1.0) or np.any(gap <= 0.0):
            raise SingularDrift("equilibrium drift is singular when V(t) <= t")
        target = self.v(Vt, z)
        current = self.v(t_arr, xi)
        xi_arr = np.asarray(xi, dtype=float)
        if check_underflow:
            lr = self.log_rho(t_arr, xi_arr, Vt, z)
            if np.any(lr < LOG_UNDERFLOW):
                raise DensityUnderflow("conditional density below 1e-300: path far outside the bridge")
        ratio = rule.w(t_arr, xi_arr) / self.model.a(t_arr, xi_arr)
        out = ratio * ((target - current) / gap - self.gamma * xi_arr)
        return float(out) if np.ndim(out) == 0 else out

    def heat_residual(self, t, x, h: float = 1e-4):
        """Relative finite-difference residual of ``u_t + u_xx / 2``."""
        u0 = self.u(t, x)
        ut = (self.u(t + h, x) - self.u(t - h, x)) / (2 * h)
        uxx = (self.u(t, x + h) - 2 * u0 + self.u(t, x - h)) / (h * h)
        return (ut + 0.5 * uxx) / u0


# ---------------------------------------------------------------------------
# module-level operations

def eval_v(kernel: BridgeKernel, t, x):
    return kernel.v(t, x)


def eval_lambda(kernel: BridgeKernel, t, y):
    return kernel.lam(t, y)


def eval_u(kernel: BridgeKernel, t, x):
    return kernel.u(t, x)


def density_p(kernel: BridgeKernel, s, x, t, y):
    return kernel.density_p(s, x, t, y)


def density_rho(kernel: BridgeKernel, s, y, t, z):
    return kernel.density_rho(s, y, t, z)


def equilibrium_drift(kernel: BridgeKernel, rule: PricingRule, t, xi, z, check_underflow=False):
    return kernel.equilibrium_drift(rule, t, xi, z, check_underflow=check_underflow)


def rule_scale(rule: PricingRule) -> IntegratedScale:
    scale = getattr(rule, "_scale", None)
    if scale is None:
        scale = IntegratedScale(rule.w, rule.w_x, rule.interval,
                                rule.closed.get("K"), rule.closed.get("K_inv"))
        object.__setattr__(rule, "_scale", scale)
    return scale


def kw_map(rule: PricingRule, t, x):
    return rule_scale(rule).forward(t, x)


def kw_inverse(rule: PricingRule, t, k):
    return rule_scale(rule).inverse(t, k)


def jump_update(rule: PricingRule, t, xi_before, size):
    """Post-trade state after a block order of ``size`` at time ``t``."""
    return kw_inverse(rule, t, kw_map(rule, t, xi_before) + size)


def _psi_scalar(rule: PricingRule, a: float, t: float, x: float) -> float:
    m = a - rule.c
    space = quad(lambda y: (y - m) / float(rule.w(t, y)), m, x)
    time = quad(lambda s: float(rule.w(s, m)), t, 1.0)
    return space + 0.5 * time


def psi(rule: PricingRule, a, t, x):
    """Insider value function ``Psi^a(t, x)`` for terminal value ``a``."""
    if "psi" in rule.closed:
        return rule.closed["psi"](a, t, x)
    return _vectorize(lambda a_, t_, x_: _psi_scalar(rule, a_, t_, x_))(a, t, x)


def psi_increment(rule: PricingRule, a, t, x0, x1):
    """``Psi^a(t, x1) - Psi^a(t, x0)``; the time integral cancels."""
    if "psi" in rule.closed:
        return rule.closed["psi"](a, t, x1) - rule.closed["psi"](a, t, x0)

    def one(a_, t_, x0_, x1_):
        m = a_ - rule.c
        return quad(lambda y: (y - m) / float(rule.w(t_, y)), x0_, x1_)
    return _vectorize(one)(a, t, x0, x1)


def psi_pde_residual(rule: PricingRule, gamma: float, a: float, t: float, x: float,
                     h: float = 1e-4) -> float:
    """``Psi_t + w^2 / 2 * Psi_xx - gamma / 2 * (x - (a - c))^2`` by central differences."""
    f = lambda tt, xx: float(psi(rule, a, tt, xx))
    pt = (f(t + h, x) - f(t - h, x)) / (2 * h)
    pxx = (f(t, x + h) - 2 * f(t, x) + f(t, x - h)) / (h * h)
    w = float(rule.w(t, x))
    return pt + 0.5 * w * w * pxx - 0.5 * gamma * (x - (a - rule.c)) ** 2


def jump_penalty(rule: PricingRule, a, t, xi_before, xi_after, size):
    """Pathwise penalty of a block trade; non-positive under the rule's own map."""
    inc = psi_increment(rule, a, t, xi_before, xi_after)
    return inc - (np.asarray(xi_after) + rule.c - a) * size
