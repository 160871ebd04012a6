"""Static and trajectory analysis.

Static: traffic equations, subcriticality of the load vector, and the exact
parameter conditions for the two-component counterexample network.

Dynamic: detection of the alternating drain/refill cycles in a recorded
trajectory, an empirical check that arrival counts concentrate, and
empirical stability proxies (emptiness, average backlog, drift).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy import optimize, stats

from .network import NetworkSpec

INTERIOR = "interior"
BOUNDARY = "boundary"
SUPERCRITICAL = "supercritical"
BOUNDARY_TOL = 1e-12


class OpenNetworkError(ValueError):
    """The routing matrix does not let every job eventually leave."""


# ---- traffic ------------------------------------------------------------

@dataclass(frozen=True)
class TrafficSolution:
    lam: np.ndarray
    rho_class: np.ndarray
    rho_queue: np.ndarray
    r_rho: float | None
    residual: float

    def to_json(self, spec: NetworkSpec) -> dict:
        return {
            "lambda": dict(zip(spec.classes, self.lam.tolist())),
            "rho_class": dict(zip(spec.classes, self.rho_class.tolist())),
            "rho_queue": dict(zip(spec.queues, self.rho_queue.tolist())),
            "r_rho": self.r_rho,
            "residual": self.residual,
        }


def constraint_loads(spec: NetworkSpec, rho_queue: Sequence[float]) -> list[float]:
    """``<c, rho> / bound`` for every constraint row."""
    return [float(np.dot(row.coeffs, rho_queue)) / row.bound for row in spec.schedule_set.rows]


def traffic_solve(spec: NetworkSpec) -> TrafficSolution:
    """Solve ``lam = a + lam P`` and derive per-class and per-queue loads."""
    a = spec.arrival_rate
    P = spec.routing
    M = np.eye(spec.n_classes) - P
    try:
        if abs(np.linalg.det(M)) < 1e-14:
            raise np.linalg.LinAlgError("singular")
        lam = np.linalg.solve(M.T, a)
    except np.linalg.LinAlgError as exc:
        raise OpenNetworkError("I - P is singular: some jobs never leave the network") from exc
    residual = float(np.max(np.abs(lam - a - lam @ P))) if spec.n_classes else 0.0
    rho_class = lam / np.asarray(spec.service)
    rho_queue = np.zeros(spec.n_queues)
    np.add.at(rho_queue, np.asarray(spec.class_queue), rho_class)
    r_rho = None
    if not spec.schedule_set.is_explicit:
        r_rho = max(constraint_loads(spec, rho_queue))
    return TrafficSolution(lam, rho_class, rho_queue, r_rho, residual)


@dataclass(frozen=True)
class SubcriticalReport:
    status: str
    margin: float
    load: float
    method: str

    def to_json(self) -> dict:
        return asdict(self)


def _classify(margin: float) -> str:
    if margin > BOUNDARY_TOL:
        return INTERIOR
    if margin >= -BOUNDARY_TOL:
        return BOUNDARY
    return SUPERCRITICAL


def hull_margin_lp(schedules: Sequence[Sequence[int]], rho: Sequence[float]) -> float:
    """Largest ``eps`` with ``(1 + eps) rho`` in the convex hull of a downward-closed point set."""
    S = np.asarray(schedules, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if not np.any(rho > 0):
        return math.inf
    n = len(S)
    # variables: mixture weights mu (n), eps;  maximize eps
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A_ub = np.zeros((S.shape[1] + 1, n + 1))
    b_ub = np.zeros(S.shape[1] + 1)
    A_ub[:-1, :n] = -S.T
    A_ub[:-1, -1] = rho
    b_ub[:-1] = -rho
    A_ub[-1, :n] = 1.0
    b_ub[-1] = 1.0
    bounds = [(0, None)] * n + [(-1.0, None)]
    res = optimize.linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"hull LP failed: {res.message}")
    return float(res.x[-1])


def subcritical_check(spec: NetworkSpec, traffic: TrafficSolution | None = None, max_explicit: int = 50_000) -> SubcriticalReport:
    """Locate the load vector relative to the capacity region.

    ``margin`` is the largest ``eps`` with ``(1 + eps) rho`` still feasible,
    so both schedule-set forms report the same quantity; ``load`` is the
    largest constraint load (constraint form) or ``1 / (1 + eps)``.
    """
    traffic = traffic or traffic_solve(spec)
    rho = traffic.rho_queue
    sset = spec.schedule_set
    if sset.is_explicit and len(sset.schedules) <= max_explicit:
        eps = hull_margin_lp(sset.schedules, rho)
        load = 0.0 if math.isinf(eps) else 1.0 / (1.0 + eps) if eps > -1 else math.inf
        return SubcriticalReport(_classify(eps), eps, load, "hull-lp")
    if sset.is_explicit:
        raise ValueError(f"explicit set with {len(sset.schedules)} schedules is too large for the hull LP")
    r = max(constraint_loads(spec, rho))
    if r <= 0:
        return SubcriticalReport(INTERIOR, math.inf, r, "constraints")
    eps = 1.0 / r - 1.0
    if abs(r - 1.0) <= BOUNDARY_TOL:
        eps = 0.0
    return SubcriticalReport(_classify(eps), eps, r, "constraints")


# ---- parameter conditions ----------------------------------------------

def as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, str):
        return Fraction(x.strip())
    if isinstance(x, float):
        return Fraction(x).limit_denominator(10**12) if x != int(x) else Fraction(int(x))
    return Fraction(x)


@dataclass(frozen=True)
class Inequality:
    name: str
    lhs: Fraction
    rhs: Fraction
    holds: bool

    def to_json(self) -> dict:
        return {"name": self.name, "lhs": str(self.lhs), "rhs": str(self.rhs),
                "lhs_float": float(self.lhs), "rhs_float": float(self.rhs), "pass": self.holds}


@dataclass(frozen=True)
class ConditionReport:
    kind: str
    a: Fraction
    nu: int
    J: int
    checks: tuple[Inequality, ...]
    a_lower: Fraction
    a_upper: Fraction
    r_rho: Fraction
    gamma_max: Fraction

    @property
    def all_pass(self) -> bool:
        return all(c.holds for c in self.checks)

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "kind": self.kind,
            "a": str(self.a),
            "nu": self.nu,
            "J": self.J,
            "checks": [c.to_json() for c in self.checks],
            "a_lower": str(self.a_lower),
            "a_upper": str(self.a_upper),
            "r_rho": str(self.r_rho),
            "gamma_max": str(self.gamma_max),
            "all_pass": self.all_pass,
        }

    def table(self) -> str:
        lines = [f"{self.kind} conditions at a={self.a}, nu={self.nu}, J={self.J}"]
        for c in self.checks:
            mark = "PASS" if c.holds else "FAIL"
            lines.append(f"  [{mark}] {c.name:<28} {str(c.lhs):>14} < {str(c.rhs):<14} ({float(c.lhs):.6f} < {float(c.rhs):.6f})")
        lines.append(f"  a interval     : ({self.a_lower}, {self.a_upper}) ~ ({float(self.a_lower):.6f}, {float(self.a_upper):.6f})")
        lines.append(f"  r_rho          : {self.r_rho} ~ {float(self.r_rho):.6f}")
        lines.append(f"  gamma interval : (1, {self.gamma_max}) ~ (1, {float(self.gamma_max):.6f})")
        return "\n".join(lines)


THM1 = "Thm1"
THM6 = "Thm6"


def theorem_condition_check(kind: str, a, nu: int, J: int) -> ConditionReport:
    """Evaluate, in exact rational arithmetic, the parameter window for transience.

    ``Thm1`` is the plain MaxWeight network; ``Thm6`` is the same network
    under the batch longest-queue weighting.
    """
    a = as_fraction(a)
    if int(nu) != nu or int(J) != J or nu < 1 or J < 1:
        raise ValueError("nu and J must be positive integers")
    nu, J = int(nu), int(J)
    one = Fraction(1)
    r_rho = a * (1 + Fraction(1, nu))
    if kind == THM1:
        lower = Fraction(J, 2 * J - nu) if 2 * J - nu > 0 else Fraction(10**9)
        upper = 1 - Fraction((J + nu) * (J + nu**2), nu * (J**2 + J + nu**2))
        gamma_max = a / (1 - a + a * nu / J)
    elif kind == THM6:
        lower = Fraction(J, 2 * J - 1)
        upper = 1 - Fraction((J + 1) * (J + nu), nu * J**2 + J + nu)
        gamma_max = a / (1 - a + a / J)
    else:
        raise ValueError(f"unknown condition kind {kind!r}")
    checks = (
        Inequality("1 < nu", one, Fraction(nu), one < nu),
        Inequality("nu < J", Fraction(nu), Fraction(J), nu < J),
        Inequality("a above lower bound", lower, a, lower < a),
        Inequality("a below upper bound", a, upper, a < upper),
        Inequality("load r_rho < 1", r_rho, one, r_rho < 1),
        Inequality("gamma interval nonempty", one, gamma_max, one < gamma_max),
    )
    return ConditionReport(kind, a, nu, J, checks, lower, upper, r_rho, gamma_max)


def predicted_V_coefficient(a: float, nu: int, J: int, primed: bool = False) -> float:
    """Asymptotic cycle length divided by the starting mass M."""
    if primed:
        return (J / (J + 1)) / (1 - a + a / J)
    return (J / (J + nu)) / (1 - a + a * nu / J)


def predicted_growth(a: float, nu: int, J: int, primed: bool = False) -> float:
    """Asymptotic ratio of the refilled component's mass to M."""
    return float(theorem_condition_check(THM6 if primed else THM1, as_fraction(a), nu, J).gamma_max)


# ---- cycles -------------------------------------------------------------

@dataclass(frozen=True)
class Cycle:
    start: int
    U: int
    V: int
    component: str
    M: int
    M_next: int
    growth: float
    predicted_V: float | None
    balance_gap: float


@dataclass
class CycleReport:
    cycles: list[Cycle] = field(default_factory=list)
    diagnostic: str = ""
    threshold_multiplier: float = 1.0

    def __len__(self) -> int:
        return len(self.cycles)

    def __iter__(self):
        return iter(self.cycles)

    @property
    def growth_factors(self) -> np.ndarray:
        return np.array([c.growth for c in self.cycles])

    def geometric_mean_growth(self) -> float:
        g = self.growth_factors
        return float(np.exp(np.mean(np.log(g)))) if len(g) else float("nan")

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "threshold_multiplier": self.threshold_multiplier,
            "diagnostic": self.diagnostic,
            "n_cycles": len(self.cycles),
            "geometric_mean_growth": self.geometric_mean_growth() if self.cycles else None,
            "cycles": [asdict(c) for c in self.cycles],
        }


def detect_cycles(traj, tags, nu: int, a: float | None = None, primed: bool = False) -> CycleReport:
    """Find alternating drain/refill cycles in a two-component trajectory.

    A cycle starts when the loaded component X becomes balanced (its hub
    no longer dominates ``mult * max spread``).  ``U`` is the first later
    sample with at most ``nu**2`` jobs in X, and ``V`` the first sample at or
    after ``U`` where the other component Y is balanced.  ``V`` starts the
    next cycle with the roles swapped.  ``mult`` is ``nu``, or ``1`` with
    ``primed``.
    """
    mult = 1.0 if primed else float(nu)
    comps = tags.components()
    if len(comps) != 2:
        return CycleReport([], f"need exactly two tagged components, got {comps}", mult)
    times = np.asarray(traj.times)
    ql = np.asarray(traj.queue_len)
    idx = {q: i for i, q in enumerate(traj.queue_ids)}
    data = {}
    for c in comps:
        hub = idx[tags.hub(c)]
        spread = [idx[q] for q in tags.spread(c)]
        hub_len = ql[:, hub]
        max_spread = ql[:, spread].max(axis=1)
        total = hub_len + ql[:, spread].sum(axis=1)
        data[c] = (total, hub_len, max_spread, hub_len <= mult * max_spread)
    J = len(tags.spread(comps[0]))

    def first(mask: np.ndarray, i0: int) -> int | None:
        hits = np.flatnonzero(mask[i0:])
        return int(hits[0]) + i0 if len(hits) else None

    X = comps[0] if data[comps[0]][0][0] >= data[comps[1]][0][0] else comps[1]
    i = first(data[X][3], 0)
    cycles: list[Cycle] = []
    if i is None:
        return CycleReport([], f"component {X} never becomes balanced", mult)
    while True:
        Y = comps[1] if X == comps[0] else comps[0]
        tot_x = data[X][0]
        M = int(tot_x[i])
        u = first(tot_x <= nu * nu, i)
        if u is None:
            break
        v = first(data[Y][3], u)
        if v is None:
            break
        M_next = int(data[Y][0][v])
        pred = None
        if a is not None:
            pred = predicted_V_coefficient(a, nu, J, primed) * M
        hub_v = ql[v, idx[tags.hub(Y)]]
        spread_v = ql[v, [idx[q] for q in tags.spread(Y)]]
        gap = float(np.max(np.abs(hub_v - mult * spread_v)))
        cycles.append(Cycle(int(times[i]), int(times[u]), int(times[v]), X, M, M_next,
                            M_next / M if M > 0 else math.inf, pred, gap))
        if v == i:
            break
        X, i = Y, v
    diag = "" if cycles else "no complete cycle found; run longer"
    return CycleReport(cycles, diag, mult)


# ---- concentration ------------------------------------------------------

def _sup_centered_increment(counts: np.ndarray, rate: float) -> np.ndarray:
    """``sup_{s<=t} |A(t) - A(s) - rate (t - s)|`` per row, with A(0) = 0."""
    walk = np.cumsum(counts - rate, axis=1)
    hi = np.maximum(walk.max(axis=1), 0.0)
    lo = np.minimum(walk.min(axis=1), 0.0)
    return hi - lo


def concentration_test(
    spec: NetworkSpec,
    T: int,
    delta: float,
    trials: int,
    cls: str | None = None,
    seed: int = 0,
) -> float:
    """Fraction of trials where one class's arrival count stays within ``delta * T`` of its mean path.

    Only the arrival streams are simulated.  ``cls`` defaults to the class
    with the smallest positive external rate.
    """
    if T < 1 or trials < 1:
        raise ValueError("T and trials must be positive")
    if cls is None:
        rates = spec.arrival_rate
        pos = [k for k in range(spec.n_classes) if rates[k] > 0]
        if not pos:
            return 1.0
        k = min(pos, key=lambda i: (rates[i], i))
    else:
        k = spec.class_index(cls)
    rng = np.random.default_rng(np.random.SeedSequence([seed, T, trials]))
    streams = [(s.rate, dict(s.targets)) for s in spec.arrivals if k in dict(s.targets)]
    rate = sum(r * w[k] for r, w in streams)
    passed = 0
    chunk = max(1, 2_000_000 // T)
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        counts = np.zeros((n, T))
        for r, w in streams:
            fires = rng.random((n, T)) < r
            if len(w) > 1:
                # dispatch draw across the stream's classes
                goes_here = rng.random((n, T)) < w[k]
                fires &= goes_here
            counts += fires
        dev = _sup_centered_increment(counts, rate)
        passed += int(np.sum(dev <= delta * T))
        done += n
    return passed / trials


# ---- stability proxies --------------------------------------------------

@dataclass(frozen=True)
class StabilityReport:
    empty_fraction: float
    time_avg_total: float
    drift_slope: float
    slope_se: float
    p_positive: float
    n_samples: int

    def slope_nonpositive(self, n_se: float = 2.0) -> bool:
        return self.drift_slope <= n_se * self.slope_se

    def to_json(self) -> dict:
        return asdict(self)


def stability_proxy(traj, min_samples: int = 10_000, batches: int = 20) -> StabilityReport:
    """Emptiness, backlog and drift of the total queue.

    The slope is the least-squares fit of total against time.  Its standard
    error comes from regressing ``batches`` consecutive batch means on their
    mid-times, which absorbs the strong autocorrelation of queue lengths.
    ``p_positive`` is the one-sided t-test p-value for a positive drift.
    """
    t = np.asarray(traj.times, dtype=float)
    tot = np.asarray(traj.total, dtype=float)
    n = len(t)
    if n < min_samples:
        raise ValueError(f"trajectory has {n} samples; stability proxies need at least {min_samples}")
    empty = float(np.mean(tot == 0))
    avg = float(np.mean(tot[n // 2:]))
    tc = t - t.mean()
    denom = float(np.dot(tc, tc))
    slope = float(np.dot(tc, tot - tot.mean()) / denom) if denom > 0 else 0.0

    edges = np.linspace(0, n, batches + 1).astype(int)
    bt = np.array([t[edges[i]:edges[i + 1]].mean() for i in range(batches)])
    bm = np.array([tot[edges[i]:edges[i + 1]].mean() for i in range(batches)])
    btc = bt - bt.mean()
    b_slope = float(np.dot(btc, bm - bm.mean()) / np.dot(btc, btc))
    resid = bm - bm.mean() - b_slope * btc
    dof = batches - 2
    se = float(math.sqrt(np.dot(resid, resid) / dof / np.dot(btc, btc)))
    if se > 0:
        p = float(stats.t.sf(b_slope / se, dof))
    else:
        p = 0.0 if b_slope > 0 else 1.0
    return StabilityReport(empty, avg, slope, se, p, n)
