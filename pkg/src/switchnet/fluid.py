"""Fluid model of a single-class switched network and Lyapunov monitors.

The fluid queue vector evolves as ``Q' = a + D' P - D'`` where the
departure rate ``D' = p * sigma`` comes from a continuous argmax of
``sum(w_j Q_j sigma_j)`` over the schedule polytope.  Integration is explicit
Euler.  Each row's budget is water-filled so the served queues end the step
level in ``w_j Q_j / c_j``; no queue is served past its content plus inflow.
Near-ties therefore share service, which is the sliding motion of the
continuous argmax, instead of chattering between vertices.

Three Lyapunov quantities are monitored:

* ``h = max_sigma sum Q_j (sigma_j / rho_j - 1)``;
* ``f = sum Q_j D'_j / lambda_j`` and ``g = sum Q_j``, with ``h = f - g``
  along weighted runs (weights ``1/rho``);
* ``g_branch = max_sigma sum Q_j (sigma_j - rho_j)``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .analysis import TrafficSolution, traffic_solve
from .network import NetworkSpec

DEFAULT_DT = 1e-3
WHICH = ("h", "f", "g", "g_branch")


class FluidError(ValueError):
    pass


@dataclass
class FluidState:
    t: float
    Q: np.ndarray
    A: np.ndarray
    D: np.ndarray
    Pi: np.ndarray
    rate: np.ndarray
    argmax_rate: np.ndarray


@dataclass(frozen=True)
class LyapunovReading:
    t: float
    h: float
    f: float
    g: float
    g_branch: float
    left_derivative: float


class _Polytope:
    """Rows ``<c, x> <= 1`` with disjoint supports, compiled for fast vertex argmax."""

    def __init__(self, spec: NetworkSpec):
        sset = spec.schedule_set
        if sset.is_explicit:
            raise FluidError("the fluid model needs a resource-constrained schedule set")
        if not sset.has_disjoint_supports() or sset.uncovered_queues():
            raise FluidError("the fluid model needs disjoint constraint rows covering every queue")
        self.n = sset.dim
        self.rows = []
        for r in sset.rows:
            c = np.asarray(r.normalized())
            sup = np.flatnonzero(c > 0)
            self.rows.append((sup, c[sup]))

    def argmax(self, v: np.ndarray) -> np.ndarray:
        """Vertex maximizing ``<v, x>``: each row spends its budget on its best ``v_j / c_j``."""
        x = np.zeros(self.n)
        for sup, c in self.rows:
            ratio = v[sup] / c
            i = int(np.argmax(ratio))  # first maximizer: lexicographic ties
            if ratio[i] > 0:
                x[sup[i]] = 1.0 / c[i]
        return x

    def support_value(self, v: np.ndarray) -> float:
        """``max <v, x>`` over the polytope."""
        total = 0.0
        for sup, c in self.rows:
            best = float(np.max(v[sup] / c))
            if best > 0:
                total += best
        return total

    def level_allocation(self, w: np.ndarray, content: np.ndarray, p: np.ndarray, dt: float) -> np.ndarray:
        """Water-filling of each row's budget on post-step weighted values.

        ``content`` is what each queue holds this step before service
        (``Q + dt * inflow``).  Each row serves its queues so that the served
        ones end the step level in ``w_j Q_j / c_j`` and no unserved queue
        sits above that level, never draining a queue past zero.  As
        ``dt -> 0`` this is the MaxWeight argmax, and near-ties share the
        budget instead of chattering between vertices.
        """
        x = np.zeros(self.n)
        for sup, c in self.rows:
            ww, pp, q = w[sup], p[sup], content[sup]
            top = ww * q / c
            # budget spent on queue j lowers its level by drop_j per unit
            drop = ww * dt * pp / c**2
            cap = q * c / (dt * pp)
            if cap.sum() <= 1.0:
                x[sup] = cap / c
                continue
            low = top - drop * cap
            levels = np.unique(np.concatenate((top, low, [0.0])))[::-1]
            spent = np.clip((top[None, :] - levels[:, None]) / drop[None, :], 0.0, cap[None, :]).sum(axis=1)
            k = int(np.searchsorted(spent, 1.0))  # spent is nondecreasing as the level falls
            hi, lo = levels[k - 1], levels[k]
            s_hi, s_lo = spent[k - 1], spent[k]
            level = lo if s_lo == s_hi else hi - (1.0 - s_hi) * (hi - lo) / (s_lo - s_hi)
            b = np.clip((top - level) / drop, 0.0, cap)
            x[sup] = b / c
        return x

    def max_rate(self, p: np.ndarray) -> float:
        return sum(float(np.max(p[sup] / c)) for sup, c in self.rows)


def _single_class(spec: NetworkSpec) -> None:
    if spec.is_multiclass:
        raise FluidError("the fluid integrator supports single-class networks only")


def _compiled(spec: NetworkSpec) -> _Polytope:
    poly = spec._cache.get("polytope")
    if poly is None:
        poly = _Polytope(spec)
        spec._cache["polytope"] = poly
    return poly


def _queue_arrays(spec: NetworkSpec):
    """Arrival rates, service probabilities and routing indexed by queue."""
    hit = spec._cache.get("queue_arrays")
    if hit is None:
        order = np.asarray(spec.class_queue)
        a = np.zeros(spec.n_queues)
        p = np.ones(spec.n_queues)
        a[order] = spec.arrival_rate
        p[order] = spec.service
        hit = (a, p, spec.queue_routing())
        spec._cache["queue_arrays"] = hit
    return hit


def initial_fluid_state(spec: NetworkSpec, Q0: Sequence[float]) -> FluidState:
    _single_class(spec)
    Q0 = np.asarray(Q0, dtype=float)
    if Q0.shape != (spec.n_queues,):
        raise FluidError(f"Q0 must have {spec.n_queues} entries")
    if np.any(Q0 < 0):
        raise FluidError("Q0 must be nonnegative")
    z = np.zeros(spec.n_queues)
    return FluidState(0.0, Q0.copy(), z.copy(), z.copy(), z.copy(), z.copy(), z.copy())


def fluid_step(state: FluidState, spec: NetworkSpec, weights: Sequence[float] | None, dt: float) -> FluidState:
    """Advance one explicit Euler step of length ``dt``."""
    if not dt > 0:
        raise FluidError("dt must be positive")
    _single_class(spec)
    poly = _compiled(spec)
    a, p, P = _queue_arrays(spec)
    w = np.ones(spec.n_queues) if weights is None else np.asarray(weights, dtype=float)
    # the argmax ignores the weight scale; normalizing keeps round-off scale-free too
    w = w / w.max()
    Q = state.Q
    v = w * Q
    # service units each queue can use this step, given its content and inflow;
    # warm-started from the previous step's rates
    d = state.rate.copy() if state.t > 0 else p * poly.argmax(v)
    for it in range(4 * spec.n_queues + 4):
        inflow = a + d @ P
        sigma = poly.level_allocation(w, Q + dt * inflow, p, dt)
        d_new = p * sigma
        if np.max(np.abs(d_new - d)) <= 1e-12:
            d = d_new
            break
        # rows coupled through routing can oscillate; damp after a few plain sweeps
        d = d_new if it < 3 else 0.5 * (d + d_new)
    # the iteration above can cycle; trimming rates only lowers inflow elsewhere, so this settles
    for _ in range(4 * spec.n_queues + 4):
        inflow = a + d @ P
        cap = Q / dt + inflow
        if np.all(d <= cap + 1e-15):
            break
        d = np.minimum(d, cap)
    inflow = a + d @ P
    Q_new = Q + dt * (inflow - d)
    # clear negative overshoot and round-off residue of emptied queues
    Q_new[Q_new <= 1e-15] = 0.0
    return FluidState(
        state.t + dt,
        Q_new,
        state.A + dt * inflow,
        state.D + dt * d,
        state.Pi + dt * d / p,
        d,
        p * poly.argmax(w * Q_new),
    )


def lyapunov_eval(state: FluidState, spec: NetworkSpec, lam: Sequence[float], which: str) -> float:
    """Evaluate one Lyapunov quantity at ``state``.

    ``f`` uses the departure rate the weighted argmax assigns at the
    current queue vector (``state.argmax_rate``).
    """
    if which not in WHICH:
        raise FluidError(f"unknown Lyapunov function {which!r}; choose from {WHICH}")
    _single_class(spec)
    Q = np.asarray(state.Q, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if which == "g":
        return float(Q.sum())
    _, p, _ = _queue_arrays(spec)
    bad = (lam <= 0) & (Q > 0)
    if np.any(bad):
        qs = [spec.queues[j] for j in np.flatnonzero(bad)]
        raise FluidError(f"queues {qs} hold fluid but carry no traffic (lambda = 0)")
    safe = np.where(lam > 0, lam, 1.0)
    rho = safe / p
    if which == "f":
        return float(np.sum(np.where(Q > 0, Q * state.argmax_rate / safe, 0.0)))
    poly = _compiled(spec)
    if which == "h":
        return poly.support_value(np.where(Q > 0, Q / rho, 0.0)) - float(Q.sum())
    rho_true = np.where(lam > 0, rho, 0.0)
    return poly.support_value(Q) - float(np.dot(Q, rho_true))


@dataclass
class FluidRun:
    t: np.ndarray
    Q: np.ndarray
    h: np.ndarray
    f: np.ndarray
    g: np.ndarray
    g_branch: np.ndarray
    dt: float
    emptied_at: float | None
    empty_threshold: float
    final: FluidState

    @property
    def readings(self) -> list[LyapunovReading]:
        deriv = np.concatenate([[np.nan], np.diff(self.h) / self.dt])
        return [
            LyapunovReading(float(t), float(h), float(f), float(g), float(gb), float(d))
            for t, h, f, g, gb, d in zip(self.t, self.h, self.f, self.g, self.g_branch, deriv)
        ]

    def series(self, which: str) -> np.ndarray:
        return getattr(self, which)

    def to_csv(self, queue_ids: Sequence[str], every: int = 1) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", *queue_ids, "total", "h", "f", "g"])
        idx = list(range(0, len(self.t), every))
        if idx[-1] != len(self.t) - 1:
            idx.append(len(self.t) - 1)
        for i in idx:
            row = [f"{self.t[i]:.6f}", *(f"{x:.9g}" for x in self.Q[i]), f"{self.Q[i].sum():.9g}",
                   f"{self.h[i]:.9g}", f"{self.f[i]:.9g}", f"{self.g[i]:.9g}"]
            w.writerow(row)
        return buf.getvalue()


def fluid_run(
    spec: NetworkSpec,
    weights: Sequence[float] | None,
    Q0: Sequence[float],
    dt: float = DEFAULT_DT,
    t_max: float = 100.0,
    traffic: TrafficSolution | None = None,
) -> FluidRun:
    """Integrate from ``Q0`` (with ``|Q0|_1 <= 1``) until ``t_max`` or until the fluid is gone.

    The network counts as empty once ``|Q|_1 < dt * (max total drain rate)``.
    """
    if not dt > 0:
        raise FluidError("dt must be positive")
    Q0 = np.asarray(Q0, dtype=float)
    if Q0.sum() > 1 + 1e-12:
        raise FluidError(f"|Q0|_1 = {Q0.sum()} exceeds 1")
    traffic = traffic or traffic_solve(spec)
    lam = traffic.lam[np.argsort(spec.class_queue)]
    state = initial_fluid_state(spec, Q0)
    poly = _compiled(spec)
    _, p, _ = _queue_arrays(spec)
    w = np.ones(spec.n_queues) if weights is None else np.asarray(weights, dtype=float)
    state.argmax_rate = p * poly.argmax(w * state.Q)
    threshold = dt * poly.max_rate(p)

    n_max = int(math.ceil(t_max / dt))
    ts, Qs, hs, fs, gs, gbs = [], [], [], [], [], []

    def reading(s: FluidState, which: str) -> float:
        # undefined (NaN) while fluid sits in a queue that carries no traffic
        try:
            return lyapunov_eval(s, spec, lam, which)
        except FluidError:
            return math.nan

    def record(s: FluidState):
        ts.append(s.t)
        Qs.append(s.Q.copy())
        hs.append(reading(s, "h"))
        fs.append(reading(s, "f"))
        gs.append(reading(s, "g"))
        gbs.append(reading(s, "g_branch"))

    emptied = None
    if state.Q.sum() < threshold:
        emptied = 0.0
    else:
        record(state)
        for _ in range(n_max):
            state = fluid_step(state, spec, w, dt)
            record(state)
            if state.Q.sum() < threshold:
                emptied = state.t
                break
    if not ts:
        record(state)
    return FluidRun(np.array(ts), np.array(Qs), np.array(hs), np.array(fs), np.array(gs), np.array(gbs),
                    dt, emptied, threshold, state)


# ---- certificates -------------------------------------------------------

@dataclass(frozen=True)
class CertificateReport:
    which: str
    bound: float
    worst_slope: float
    worst_interval: tuple[float, float]
    tolerance: float
    lipschitz: float
    n_intervals: int
    passed: bool

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["pass"] = doc.pop("passed")
        doc["schema_version"] = 1
        return doc


def decay_rate_certificate(run: FluidRun, bound: float, which: str = "h", window: int = 100) -> CertificateReport:
    """Check that ``which`` falls at rate at least ``bound`` while fluid remains.

    Slopes are taken over consecutive windows of ``window`` steps lying
    entirely in the nonempty part of the run, so chattering at argmax ties
    averages out.  Each slope must be at most ``-bound + tol`` with
    ``tol = 10 * dt * L``, where ``L`` (the Lipschitz estimate) is the
    largest absolute window slope.
    """
    y = run.series(which)
    t = run.t
    nonempty = run.Q.sum(axis=1) >= run.empty_threshold
    slopes: list[tuple[float, float, float]] = []
    n = len(y)
    i = 0
    while i + window < n:
        j = i + window
        if nonempty[i:j].all():
            slopes.append(((y[j] - y[i]) / (t[j] - t[i]), float(t[i]), float(t[j])))
        i = j
    if not slopes:
        # too short for a full window: use the whole nonempty stretch
        idx = np.flatnonzero(nonempty)
        if len(idx) >= 2 and t[idx[-1]] > t[idx[0]]:
            i, j = idx[0], idx[-1]
            slopes.append(((y[j] - y[i]) / (t[j] - t[i]), float(t[i]), float(t[j])))
    if not slopes:
        return CertificateReport(which, bound, math.nan, (math.nan, math.nan), 0.0, 0.0, 0, False)
    L = float(max(abs(s) for s, _, _ in slopes))
    tol = float(10 * run.dt * L)
    worst, t0, t1 = max(slopes, key=lambda s: s[0])
    passed = worst <= -bound + tol
    return CertificateReport(which, bound, float(worst), (t0, t1), tol, L, len(slopes), bool(passed))


def rate_gap_margin(spec: NetworkSpec, traffic: TrafficSolution | None = None) -> float:
    """Smallest sup-norm distance from the load vector to a constraint face.

    For a row ``<c, x> <= 1`` this is ``(1 - <c, rho>) / |c|_1``: no rate
    vector on that face can match ``rho`` to within less in every queue.
    """
    traffic = traffic or traffic_solve(spec)
    rho = traffic.rho_queue
    gaps = []
    for r in spec.schedule_set.rows:
        c = np.asarray(r.normalized())
        gaps.append((1.0 - float(c @ rho)) / float(c.sum()))
    return min(gaps)


def write_certificate(report: CertificateReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2))


@dataclass(frozen=True)
class CertificatePlan:
    which: str
    bound: float
    epsilon: float
    horizon_factor: float

    def horizon(self, initial_value: float) -> float:
        """Time by which the monitored function must reach zero at the certified rate."""
        return self.horizon_factor * initial_value


def certificate_plan(spec: NetworkSpec, traffic: TrafficSolution | None = None, c: float = 0.5) -> CertificatePlan:
    """Monitored function, decay bound and emptying horizon for a network.

    * tandem lines: ``h`` with bound ``eps**2 / (2 a J**2)``, ``eps`` the
      sup-norm rate gap, horizon ``2 a J**2 h(0) / eps**2``;
    * pure branching trees: ``g_branch`` with bound ``eps**2 / 2``, ``eps``
      the rate gap divided by the number of queues, horizon
      ``2 |J| g(0) / eps**2``;
    * anything else (weighted MaxWeight): ``h`` with bound
      ``c eps**2 / |J|**2``, ``eps`` the relative load margin.
    """
    from .analysis import subcritical_check

    traffic = traffic or traffic_solve(spec)
    n = spec.n_queues
    if spec.name == "tandem":
        eps = rate_gap_margin(spec, traffic)
        a = float(spec.arrival_rate.sum())
        bound = eps**2 / (2 * a * n**2)
        return CertificatePlan("h", bound, eps, 1.0 / bound)
    if spec.name == "branching":
        eps = rate_gap_margin(spec, traffic) / n
        return CertificatePlan("g_branch", eps**2 / 2, eps, 2 * n / eps**2)
    eps = subcritical_check(spec, traffic).margin
    bound = c * eps**2 / n**2
    return CertificatePlan("h", bound, eps, 1.0 / bound)
