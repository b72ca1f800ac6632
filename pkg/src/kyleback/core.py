"""Shared domain types, time grids, random streams and numerical primitives."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy import integrate

DEFAULT_EPSILON = 2.0 ** -20
DEFAULT_STEPS = 2 ** 14
# Paths are simulated in fixed-size blocks; a path's noise depends only on
# (master_seed, path_index) because every block draws a full block of normals.
BLOCK_SIZE = 8192


class KyleBackError(Exception):
    """Base class for all errors raised by this package."""


class InvalidParameter(KyleBackError, ValueError):
    pass


class DomainViolation(KyleBackError, ValueError):
    pass


class NoConvergence(KyleBackError, RuntimeError):
    pass


class QuadratureFailure(KyleBackError, RuntimeError):
    pass


class AssumptionViolation(KyleBackError, ValueError):
    pass


class StateEscape(KyleBackError, RuntimeError):
    pass


class DensityUnderflow(KyleBackError, FloatingPointError):
    pass


class SingularDrift(KyleBackError, ValueError):
    pass


class InconsistentBundle(KyleBackError, ValueError):
    pass


class InsufficientPaths(KyleBackError, ValueError):
    pass


class StepResolution(KyleBackError, ValueError):
    pass


# ---------------------------------------------------------------------------
# time grids

@dataclass(frozen=True)
class TimeGrid:
    """Discretisation of the trading interval, stopped at ``1 - epsilon``."""

    nodes: np.ndarray
    epsilon: float
    refinement: str = "geometric"

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def end(self) -> float:
        return float(self.nodes[-1])

    def index_of(self, t: float) -> int:
        """Index of the node closest to ``t``."""
        return int(np.argmin(np.abs(self.nodes - t)))

    def first_at_or_after(self, t: float) -> int:
        idx = int(np.searchsorted(self.nodes, t - 1e-15, side="left"))
        return min(idx, self.n_nodes - 1)


def make_grid(epsilon: float = DEFAULT_EPSILON, n_steps: int = DEFAULT_STEPS,
              refinement: str = "geometric") -> TimeGrid:
    """Build a grid of ``n_steps`` nodes on ``[0, 1 - epsilon]``.

    ``geometric`` refinement uses ``1 - t_k = epsilon ** (k / (n - 1))`` so that
    the spacing at every node is proportional to its distance from maturity.
    """
    if not 0.0 < epsilon < 1.0:
        raise InvalidParameter(f"epsilon must lie in (0, 1), got {epsilon!r}")
    if 1.0 - epsilon == 1.0:
        raise InvalidParameter(f"epsilon={epsilon!r} is below double resolution at t = 1")
    if int(n_steps) != n_steps or n_steps < 2:
        raise InvalidParameter(f"n_steps must be an integer >= 2, got {n_steps!r}")
    n_steps = int(n_steps)
    if refinement == "uniform":
        nodes = np.linspace(0.0, 1.0 - epsilon, n_steps)
    elif refinement == "geometric":
        k = np.arange(n_steps) / (n_steps - 1)
        nodes = 1.0 - epsilon ** k
        nodes[0] = 0.0
        nodes[-1] = 1.0 - epsilon
    else:
        raise InvalidParameter(f"unknown refinement {refinement!r}")
    if np.any(np.diff(nodes) <= 0):
        raise InvalidParameter("grid is not strictly increasing; use fewer steps or a larger epsilon")
    return TimeGrid(nodes, float(epsilon), refinement)


# ---------------------------------------------------------------------------
# random streams

@dataclass(frozen=True)
class RngContract:
    """Counter-based (Philox) substreams derived from one 64-bit master seed."""

    master_seed: int

    def __post_init__(self):
        seed = int(self.master_seed)
        if not 0 <= seed < 2 ** 64:
            raise InvalidParameter("master_seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "master_seed", seed)

    def stream(self, index: int, purpose: int = 0) -> np.random.Generator:
        seq = np.random.SeedSequence(self.master_seed, spawn_key=(int(purpose), int(index)))
        return np.random.Generator(np.random.Philox(seq))


# purposes of block substreams
STREAM_STEPS, STREAM_INIT, STREAM_TERMINAL, STREAM_RETRY = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# numerical primitives

def finite_diff(f: Callable[[float], float], x: float, order: int = 1, h: float = 1e-4,
                domain: Optional[tuple[float, float]] = None) -> float:
    """Central difference of first or second order, O(h**2) accurate."""
    if h <= 0:
        raise InvalidParameter("h must be positive")
    if domain is not None:
        lo, hi = domain
        if x - 2 * h <= lo or x + 2 * h >= hi:
            raise DomainViolation(f"stencil around {x} with h={h} leaves ({lo}, {hi})")
    if order == 1:
        return (f(x + h) - f(x - h)) / (2.0 * h)
    if order == 2:
        return (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h)
    raise InvalidParameter("order must be 1 or 2")


def fd_partial(f: Callable, arg: int, order: int, h_rel: float = 1e-5) -> Callable:
    """Vectorised central-difference partial derivative of ``f(t, x)``.

    Step is ``h_rel * (1 + |z|)`` in the differentiated argument ``z``.
    """
    def deriv(t, x):
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        z = t if arg == 0 else x
        h = h_rel * (1.0 + np.abs(z))

        def at(shift):
            return f(t + shift, x) if arg == 0 else f(t, x + shift)

        if order == 1:
            return (at(h) - at(-h)) / (2.0 * h)
        return (at(h) - 2.0 * at(0.0) + at(-h)) / (h * h)
    return deriv


QUAD_EPSABS = 1e-10
QUAD_MAX_EVALS = 10 ** 6


def quad(f: Callable[[float], float], lo: float, hi: float, epsabs: float = QUAD_EPSABS,
         epsrel: float = 1e-12) -> float:
    """Adaptive quadrature with a hard evaluation budget."""
    if lo == hi:
        return 0.0
    limit = QUAD_MAX_EVALS // 21
    with np.errstate(all="ignore"):
        val, err, info = integrate.quad(f, lo, hi, epsabs=epsabs, epsrel=epsrel,
                                        limit=limit, full_output=1)[:3]
    if info["neval"] > QUAD_MAX_EVALS or not np.isfinite(val):
        raise QuadratureFailure(f"quadrature on [{lo}, {hi}] failed (value {val}, err {err})")
    if err > max(10 * epsabs, 1e-6 * abs(val)):
        raise QuadratureFailure(f"quadrature on [{lo}, {hi}] did not meet tolerance: err={err:.3g}")
    return float(val)


def fsum_mean(x: np.ndarray) -> float:
    """Order-independent mean (correctly rounded sum)."""
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 0:
        return float("nan")
    return math.fsum(x.tolist()) / x.size


def mean_se(x: np.ndarray) -> tuple[float, float]:
    """Mean and standard error, both computed with compensated sums."""
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    if n < 2:
        return fsum_mean(x), float("nan")
    m = fsum_mean(x)
    var = math.fsum(((x - m) ** 2).tolist()) / (n - 1)
    return m, math.sqrt(var / n)


# ---------------------------------------------------------------------------
# domain types

def _const(value: float) -> Callable:
    def f(*args):
        shape = np.broadcast(*[np.asarray(a) for a in args]).shape
        return np.full(shape, value) if shape else float(value)
    return f


@dataclass(frozen=True)
class SignalModel:
    """Insider signal ``Z_t = eta_{V(t)}`` with ``d eta = a(t, eta) d beta``.

    ``closed`` may carry exact expressions that override quadrature and
    root-finding: ``v``, ``lam``, ``log_u``, ``eta_var`` (Gaussian base),
    ``signal_var`` (exact increments of a Gaussian signal).
    """

    gamma: float
    a: Callable
    sigma: Callable
    V: Callable
    interval: tuple[float, float] = (-math.inf, math.inf)
    a_x: Optional[Callable] = None
    a_xx: Optional[Callable] = None
    a_t: Optional[Callable] = None
    kind: str = "custom"
    closed: Mapping[str, Callable] = field(default_factory=dict)
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.gamma > 0:
            raise AssumptionViolation(f"risk aversion gamma must be > 0, got {self.gamma!r}")
        lo, hi = self.interval
        if not lo < 0.0 < hi:
            raise AssumptionViolation(f"state interval {self.interval} must contain 0")
        exact = all(d is not None for d in (self.a_x, self.a_xx, self.a_t))
        object.__setattr__(self, "exact_derivatives", exact)
        if self.a_x is None:
            object.__setattr__(self, "a_x", fd_partial(self.a, 1, 1))
        if self.a_xx is None:
            object.__setattr__(self, "a_xx", fd_partial(self.a, 1, 2))
        if self.a_t is None:
            object.__setattr__(self, "a_t", fd_partial(self.a, 0, 1))

    @property
    def v0(self) -> float:
        return float(self.V(0.0))

    def contains(self, x) -> np.ndarray:
        lo, hi = self.interval
        x = np.asarray(x)
        return (x > lo) & (x < hi)


@dataclass(frozen=True)
class PricingRule:
    """Market-maker rule ``P = xi + c`` with ``d xi = w(t, xi) dY`` (continuous part).

    ``closed`` may carry ``K``, ``K_inv`` and ``psi`` in exact form.
    """

    w: Callable
    c: float = 0.0
    w_x: Optional[Callable] = None
    w_xx: Optional[Callable] = None
    w_t: Optional[Callable] = None
    closed: Mapping[str, Callable] = field(default_factory=dict)
    interval: tuple[float, float] = (-math.inf, math.inf)
    label: str = "custom"

    def __post_init__(self):
        exact = all(d is not None for d in (self.w_x, self.w_xx, self.w_t))
        object.__setattr__(self, "exact_derivatives", exact)
        if self.w_x is None:
            object.__setattr__(self, "w_x", fd_partial(self.w, 1, 1))
        if self.w_xx is None:
            object.__setattr__(self, "w_xx", fd_partial(self.w, 1, 2))
        if self.w_t is None:
            object.__setattr__(self, "w_t", fd_partial(self.w, 0, 1))

    @classmethod
    def constant(cls, value: float, c: float = 0.0) -> "PricingRule":
        zero = _const(0.0)
        return cls(w=_const(value), c=c, w_x=zero, w_xx=zero, w_t=zero, label=f"constant({value:g})")


@dataclass
class PathBundle:
    """Simulated paths of one strategy, recorded at a subset of grid nodes.

    Arrays indexed ``[path, record]`` hold the processes at ``times``; the
    per-path vectors hold terminal quantities and running accumulators.
    """

    grid: TimeGrid
    record_index: np.ndarray
    B: np.ndarray
    beta: np.ndarray
    Z: np.ndarray
    xi: np.ndarray
    Y: np.ndarray
    theta: np.ndarray
    Z1: np.ndarray
    wealth: np.ndarray
    wealth_ibp: np.ndarray
    stoch_int: np.ndarray        # sum of P_t dB_t
    price_sq_int: np.ndarray     # sum of P_t^2 dt
    U_end: np.ndarray
    jump_times: np.ndarray
    jump_sizes: np.ndarray
    xi_before: np.ndarray
    xi_after: np.ndarray
    failed: np.ndarray
    seed: int
    strategy: str
    c: float = 0.0
    errors: list = field(default_factory=list)

    @property
    def times(self) -> np.ndarray:
        return self.grid.nodes[self.record_index]

    @property
    def n_paths(self) -> int:
        return self.Z.shape[0]

    @property
    def ok(self) -> np.ndarray:
        return ~self.failed

    @property
    def exclusion_rate(self) -> float:
        return float(np.mean(self.failed)) if self.failed.size else 0.0

    @property
    def P(self) -> np.ndarray:
        return self.xi + self.c

    def column(self, t: float) -> int:
        return int(np.argmin(np.abs(self.times - t)))


# ---------------------------------------------------------------------------
# verification reports

_SIDES = ("abs", "min", "max", "gt", "lt")


def _clean(value):
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in sorted(value.items(), key=lambda kv: str(kv[0]))}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_clean(v) for v in (value.tolist() if isinstance(value, np.ndarray) else value)]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


@dataclass
class Entry:
    """One verification statistic.

    ``sided`` fixes how the pass flag follows from the numbers:
    ``abs``: |estimate - target| <= tolerance; ``min``: estimate >= target - tolerance;
    ``max``: estimate <= target + tolerance; ``gt``/``lt``: strict comparison with target.
    """

    name: str
    estimate: float
    target: float = 0.0
    tolerance: float = 0.0
    se: float = float("nan")
    sided: str = "abs"
    expect_pass: bool = True
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.sided not in _SIDES:
            raise InvalidParameter(f"sided must be one of {_SIDES}")
        self.estimate = float(self.estimate)

    @property
    def passed(self) -> bool:
        e, t, tol = self.estimate, self.target, self.tolerance
        if math.isnan(e):
            return False
        if self.sided == "abs":
            return abs(e - t) <= tol
        if self.sided == "min":
            return e >= t - tol
        if self.sided == "max":
            return e <= t + tol
        if self.sided == "gt":
            return e > t
        return e < t

    @property
    def ok(self) -> bool:
        return self.passed == self.expect_pass

    def as_dict(self) -> dict:
        return _clean({
            "name": self.name, "estimate": self.estimate, "target": self.target,
            "tolerance": self.tolerance, "se": self.se, "sided": self.sided,
            "passed": self.passed, "expect_pass": self.expect_pass, "ok": self.ok,
            "meta": self.meta,
        })


@dataclass
class VerificationReport:
    entries: list = field(default_factory=list)
    seed: Optional[int] = None
    config_hash: Optional[str] = None
    meta: dict = field(default_factory=dict)

    def add(self, entry: Entry) -> Entry:
        self.entries.append(entry)
        return entry

    def extend(self, other: "VerificationReport | Sequence[Entry]") -> None:
        items = other.entries if isinstance(other, VerificationReport) else other
        self.entries.extend(items)

    @property
    def overall(self) -> bool:
        return all(e.ok for e in self.entries)

    def __getitem__(self, name: str) -> Entry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def names(self) -> list:
        return [e.name for e in self.entries]

    def as_dict(self) -> dict:
        return _clean({
            "config_hash": self.config_hash, "seed": self.seed, "overall": self.overall,
            "meta": self.meta, "entries": [e.as_dict() for e in self.entries],
        })

    def to_json(self) -> str:
        import json
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        rows = [("test", "estimate", "target", "tol", "pass", "expected")]
        for e in self.entries:
            rows.append((e.name, f"{e.estimate:.6g}", f"{e.target:.6g}", f"{e.tolerance:.3g}",
                         "yes" if e.passed else "no",
                         "ok" if e.ok else ("FAIL" if e.expect_pass else "NEG-CONTROL PASSED")))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        lines.append(f"overall: {'PASS' if self.overall else 'FAIL'}")
        return "\n".join(lines) + "\n"
