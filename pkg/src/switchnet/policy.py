"""Scheduling policies: queue lengths in, feasible schedule out.

All MaxWeight-type policies reduce to one primitive, "maximize
``sum(v_j * sigma_j)`` over the schedule set" for a value vector ``v``.
:class:`ArgmaxSolver` compiles a schedule set once and answers that question
exactly:

* explicit sets are scanned in full;
* resource-constrained sets with disjoint row supports are solved row by
  row.  Inside a row, queues sharing a coefficient form a group, and only the
  best queue of a group is worth serving, so the row reduces to a small
  integer knapsack over group unit counts.  The maximal count vectors are
  precomputed, which makes the per-step cost linear in the number of queues.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .network import FEAS_TOL, NetworkSpec, Schedule, ScheduleSet, _fit, _row_groups

MAX_WEIGHT = "MaxWeight"
WEIGHTED_MAX_WEIGHT = "WeightedMaxWeight"
LARGEST_CLASS = "LargestClassWeightedMaxWeight"
LQFS_BATCH = "LQFSBatch"
BACK_PRESSURE = "BackPressure"
PROPORTIONAL = "ProportionalScheduler"
KINDS = (MAX_WEIGHT, WEIGHTED_MAX_WEIGHT, LARGEST_CLASS, LQFS_BATCH, BACK_PRESSURE, PROPORTIONAL)

LEXICOGRAPHIC = "Lexicographic"
SEEDED_RANDOM = "SeededRandom"

AUTO_RHO = "auto_rho"


class OverlappingSupportError(ValueError):
    """The constraint rows share queues; the row-wise solver does not apply."""


@dataclass(frozen=True)
class PolicyConfig:
    kind: str = MAX_WEIGHT
    weights: tuple[float, ...] | None = None
    class_weights: tuple[float, ...] | None = None
    tie_break: str = LEXICOGRAPHIC
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}; expected one of {KINDS}")
        if self.tie_break not in (LEXICOGRAPHIC, SEEDED_RANDOM):
            raise ValueError(f"unknown tie_break {self.tie_break!r}")
        for name in ("weights", "class_weights"):
            w = getattr(self, name)
            if w is not None:
                w = tuple(float(x) for x in w)
                object.__setattr__(self, name, w)
                if any(not x > 0 for x in w):
                    raise ValueError(f"{name} must be strictly positive")
        if self.kind in (WEIGHTED_MAX_WEIGHT, LQFS_BATCH) and self.weights is None:
            raise ValueError(f"{self.kind} requires queue weights")
        if self.kind == LARGEST_CLASS and self.class_weights is None:
            raise ValueError(f"{self.kind} requires class weights")

    def to_json(self) -> dict:
        doc: dict = {"kind": self.kind, "tie_break": self.tie_break}
        if self.weights is not None:
            doc["weights"] = list(self.weights)
        if self.class_weights is not None:
            doc["class_weights"] = list(self.class_weights)
        if self.seed is not None:
            doc["seed"] = self.seed
        return doc

    @classmethod
    def from_json(cls, doc: Mapping, spec: NetworkSpec | None = None) -> "PolicyConfig":
        """Parse a ``policy`` block; ``"auto_rho"`` weights are resolved against ``spec``."""
        kind = doc.get("kind", MAX_WEIGHT)
        weights = doc.get("weights")
        class_weights = doc.get("class_weights")
        if weights == AUTO_RHO or class_weights == AUTO_RHO:
            if spec is None:
                raise ValueError("auto_rho weights need a network to solve traffic on")
            from .analysis import traffic_solve

            tr = traffic_solve(spec)
            if weights == AUTO_RHO:
                weights = inverse_weights(tr.rho_queue)
            if class_weights == AUTO_RHO:
                class_weights = inverse_weights(tr.rho_class)
        if kind == LARGEST_CLASS and class_weights is None and spec is not None:
            from .analysis import traffic_solve

            class_weights = inverse_weights(traffic_solve(spec).rho_class)
        return cls(
            kind=kind,
            weights=tuple(weights) if weights is not None else None,
            class_weights=tuple(class_weights) if class_weights is not None else None,
            tie_break=doc.get("tie_break", LEXICOGRAPHIC),
            seed=doc.get("seed"),
        )


def inverse_weights(rho: Sequence[float]) -> tuple[float, ...]:
    rho = [float(r) for r in rho]
    if any(r <= 0 for r in rho):
        bad = [j for j, r in enumerate(rho) if r <= 0]
        raise ValueError(f"cannot form 1/rho weights: zero load at indices {bad}")
    return tuple(1.0 / r for r in rho)


# ---- exact argmax -------------------------------------------------------

def _maximal_count_vectors(coeffs: Sequence[float]) -> list[tuple[int, ...]]:
    """Group unit counts that fill a unit budget so no group can take one more unit."""
    cmin = min(coeffs)
    out: list[tuple[int, ...]] = []
    cur: list[int] = []

    def rec(g: int, budget: float):
        if g == len(coeffs):
            if budget < cmin * (1 - FEAS_TOL):
                out.append(tuple(cur))
            return
        c = coeffs[g]
        for n in range(_fit(budget, c), -1, -1):
            cur.append(n)
            rec(g + 1, budget - n * c)
            cur.pop()

    rec(0, 1.0)
    return out


class _Row:
    __slots__ = ("groups", "counts")

    def __init__(self, coeffs: Sequence[float]):
        self.groups = [tuple(members) for _, members in _row_groups(coeffs)]
        self.counts = _maximal_count_vectors([c for c, _ in _row_groups(coeffs)])


class ArgmaxSolver:
    """Exact maximizer of ``sum(v_j * sigma_j)`` over a fixed schedule set."""

    def __init__(self, sset: ScheduleSet):
        self.sset = sset
        self.dim = sset.dim
        if sset.is_explicit:
            self._explicit = np.array(sset.schedules, dtype=np.int64)
            self._explicit_rows = [list(map(int, s)) for s in sset.schedules]
            self._rows: list[_Row] = []
        else:
            if not sset.has_disjoint_supports():
                raise OverlappingSupportError(
                    "constraint rows overlap; convert the set to explicit form for exact argmax"
                )
            unc = sset.uncovered_queues()
            if unc:
                raise ValueError(f"queues {unc} are unconstrained, so the argmax is unbounded")
            self._rows = [_Row(r.normalized()) for r in sset.rows]

    def solve(self, values: Sequence[float], rng: np.random.Generator | None = None) -> list[int]:
        """Return a maximizing schedule.

        Ties between maximizers are broken lexicographically unless ``rng``
        is given, in which case a uniformly random maximizer is drawn from
        the candidates the solver considers.
        """
        if len(values) != self.dim:
            raise ValueError(f"value vector has length {len(values)}, schedule set has dimension {self.dim}")
        if self.sset.is_explicit:
            return self._solve_explicit(values, rng)
        sigma = [0] * self.dim
        for row in self._rows:
            self._solve_row(row, values, sigma, rng)
        return sigma

    def _solve_explicit(self, values, rng) -> list[int]:
        obj = self._explicit @ np.asarray(values, dtype=float)
        best = obj.max()
        tol = 1e-12 * max(1.0, abs(best))
        tied = np.flatnonzero(obj >= best - tol)
        if rng is not None and len(tied) > 1:
            pick = int(tied[rng.integers(len(tied))])
        else:
            pick = int(tied[0])  # schedules are stored in lexicographic order
        return list(self._explicit_rows[pick])

    @staticmethod
    def _solve_row(row: _Row, values, sigma: list[int], rng) -> None:
        groups = row.groups
        gval = []
        gtied = []
        for members in groups:
            best = values[members[0]]
            tied = [members[0]]
            for j in members[1:]:
                v = values[j]
                if v > best:
                    best = v
                    tied = [j]
                elif v == best:
                    tied.append(j)
            gval.append(best if best > 0 else 0)
            gtied.append(tied)

        best_obj = -1.0
        cands: list[tuple[int, ...]] = []
        for cnt in row.counts:
            obj = 0
            for n, v in zip(cnt, gval):
                obj += n * v
            if obj > best_obj:
                best_obj = obj
                cands = [cnt]
            elif obj == best_obj:
                cands.append(cnt)
        if best_obj <= 0:
            return

        if len(cands) > 1:
            # counts on worthless groups are dropped, which merges equivalent candidates
            cands = sorted({tuple(n if v > 0 else 0 for n, v in zip(cnt, gval)) for cnt in cands})
        if len(cands) > 1:
            built = []
            for cnt in cands:
                local: dict[int, int] = {}
                _fill(local, cnt, gval, gtied, None)
                built.append(local)
            if rng is not None:
                chosen = built[int(rng.integers(len(built)))]
            else:
                keys = sorted({j for b in built for j in b})
                chosen = min(built, key=lambda b: [b.get(j, 0) for j in keys])
        else:
            chosen = {}
            _fill(chosen, cands[0], gval, gtied, rng)
        for j, n in chosen.items():
            sigma[j] = n


def _fill(local: dict[int, int], cnt, gval, gtied, rng) -> None:
    for n, v, tied in zip(cnt, gval, gtied):
        if n == 0 or v <= 0:
            continue
        if len(tied) == 1:
            local[tied[0]] = n
            continue
        if rng is not None:
            tied = [tied[i] for i in rng.permutation(len(tied))]
        base, extra = divmod(n, len(tied))
        for i, j in enumerate(tied):
            units = base + (1 if i < extra else 0)
            if units:
                local[j] = units


_SOLVER_CACHE: dict[int, ArgmaxSolver] = {}


def solver_for(sset: ScheduleSet) -> ArgmaxSolver:
    key = id(sset)
    hit = _SOLVER_CACHE.get(key)
    if hit is None or hit.sset is not sset:
        hit = ArgmaxSolver(sset)
        _SOLVER_CACHE[key] = hit
    return hit


def objective(sigma: Sequence[int], values: Sequence[float]) -> float:
    return float(sum(s * v for s, v in zip(sigma, values)))


def max_weight_schedule(
    Q: Sequence[int],
    sset: ScheduleSet,
    weights: Sequence[float] | None = None,
    tie_break: str = LEXICOGRAPHIC,
    rng: np.random.Generator | None = None,
) -> Schedule:
    """Schedule maximizing ``sum(w_j Q_j sigma_j)``."""
    if len(Q) != sset.dim:
        raise ValueError(f"Q has length {len(Q)}, schedule set has dimension {sset.dim}")
    values = list(Q) if weights is None else [w * q for w, q in zip(weights, Q)]
    use_rng = _tie_rng(tie_break, rng)
    return Schedule(tuple(solver_for(sset).solve(values, use_rng)))


def _tie_rng(tie_break: str, rng):
    if tie_break == SEEDED_RANDOM:
        if rng is None:
            raise ValueError("SeededRandom tie-break needs an rng")
        return rng
    return None


def largest_class_values(Qtilde: Sequence[int], class_weights: Sequence[float], spec: NetworkSpec):
    """Per-queue value ``max_k w_k Qtilde_k`` and the class attaining it (lowest index on ties)."""
    qstar = [0.0] * spec.n_queues
    owner = [-1] * spec.n_queues
    for k, j in enumerate(spec.class_queue):
        v = class_weights[k] * Qtilde[k]
        if owner[j] < 0 or v > qstar[j]:
            qstar[j] = v
            owner[j] = k
    return qstar, owner


def largest_class_schedule(
    Qtilde: Sequence[int],
    class_weights: Sequence[float],
    spec: NetworkSpec,
    tie_break: str = LEXICOGRAPHIC,
    rng: np.random.Generator | None = None,
) -> Schedule:
    """MaxWeight on the per-queue largest weighted class; each queue's work goes to that class."""
    if len(Qtilde) != spec.n_classes:
        raise ValueError(f"class vector has length {len(Qtilde)}, network has {spec.n_classes} classes")
    qstar, owner = largest_class_values(Qtilde, class_weights, spec)
    sigma = solver_for(spec.schedule_set).solve(qstar, _tie_rng(tie_break, rng))
    split = [0] * spec.n_classes
    for j, s in enumerate(sigma):
        if s:
            split[owner[j]] = s
    return Schedule(tuple(sigma), tuple(split))


def back_pressure_weights(Q: Sequence[int], spec: NetworkSpec) -> list[float]:
    """Differential backlog ``Q_j - sum_j' P_jj' Q_j'`` per queue."""
    P = spec.queue_routing()
    q = np.asarray(Q, dtype=float)
    return (q - P @ q).tolist()


def back_pressure_schedule(
    Q: Sequence[int],
    spec: NetworkSpec,
    tie_break: str = LEXICOGRAPHIC,
    rng: np.random.Generator | None = None,
) -> Schedule:
    b = back_pressure_weights(Q, spec)
    values = [x if x > 0 else 0.0 for x in b]
    sigma = solver_for(spec.schedule_set).solve(values, _tie_rng(tie_break, rng))
    return Schedule(tuple(s if v > 0 else 0 for s, v in zip(sigma, values)))


# ---- proportional scheduler --------------------------------------------

def _require_disjoint(sset: ScheduleSet) -> None:
    if sset.is_explicit:
        raise ValueError("proportional scheduling supports resource-constrained sets only")
    if not sset.has_disjoint_supports():
        raise OverlappingSupportError("proportional scheduling needs disjoint constraint supports")


def proportional_target(Q: Sequence[float], sset: ScheduleSet) -> np.ndarray:
    """Continuous maximizer of ``sum(Q_j log sigma_j)`` over the constraint polytope.

    Each row spends its budget in proportion to queue length, so
    ``sigma_j = (Q_j / sum_row Q) / c_j``; empty queues receive nothing.
    """
    _require_disjoint(sset)
    out = np.zeros(sset.dim)
    for row in sset.rows:
        c = row.normalized()
        sup = row.support
        tot = float(sum(Q[j] for j in sup))
        if tot <= 0:
            continue
        for j in sup:
            out[j] = (Q[j] / tot) / c[j]
    return out


def proportional_schedule(Q: Sequence[int], sset: ScheduleSet, rng: np.random.Generator) -> Schedule:
    """Random integer schedule realizing the proportional target on average.

    Per row, one queue is drawn with probability proportional to its length
    and receives the row's whole integer capacity ``floor(1/c_j)``.  When
    ``1/c_j`` is an integer the mean equals :func:`proportional_target`.
    """
    _require_disjoint(sset)
    sigma = [0] * sset.dim
    for row in sset.rows:
        c = row.normalized()
        sup = [j for j in row.support if Q[j] > 0]
        if not sup:
            continue
        tot = float(sum(Q[j] for j in sup))
        u = rng.random() * tot
        acc = 0.0
        pick = sup[-1]
        for j in sup:
            acc += Q[j]
            if u < acc:
                pick = j
                break
        sigma[pick] = _fit(1.0, c[pick])
    return Schedule(tuple(sigma))


# ---- runtime policy -----------------------------------------------------

@dataclass
class Policy:
    """A :class:`PolicyConfig` bound to a network, ready to be called each step."""

    config: PolicyConfig
    spec: NetworkSpec
    _solver: ArgmaxSolver | None = field(default=None, repr=False)

    def __post_init__(self):
        cfg, spec = self.config, self.spec
        if cfg.weights is not None and len(cfg.weights) != spec.n_queues:
            raise ValueError(f"policy has {len(cfg.weights)} queue weights for {spec.n_queues} queues")
        if cfg.class_weights is not None and len(cfg.class_weights) != spec.n_classes:
            raise ValueError(f"policy has {len(cfg.class_weights)} class weights for {spec.n_classes} classes")
        if cfg.kind == PROPORTIONAL:
            _require_disjoint(spec.schedule_set)
        else:
            self._solver = ArgmaxSolver(spec.schedule_set)
        if cfg.kind == BACK_PRESSURE:
            self._P = spec.queue_routing()
        self._weights = None
        if cfg.kind in (WEIGHTED_MAX_WEIGHT, LQFS_BATCH) or (cfg.kind == MAX_WEIGHT and cfg.weights is not None):
            self._weights = list(cfg.weights)
        self.uses_classes = cfg.kind == LARGEST_CLASS

    def decide(self, Q: Sequence[int], Qtilde: Sequence[int] | None, rng: np.random.Generator | None):
        """Return ``(sigma, class_split)``; ``class_split`` is ``None`` for FIFO service."""
        cfg = self.config
        tie = rng if cfg.tie_break == SEEDED_RANDOM else None
        kind = cfg.kind
        if kind == LARGEST_CLASS:
            qstar, owner = largest_class_values(Qtilde, cfg.class_weights, self.spec)
            sigma = self._solver.solve(qstar, tie)
            split = [0] * self.spec.n_classes
            for j, s in enumerate(sigma):
                if s:
                    split[owner[j]] = s
            return sigma, split
        if kind == PROPORTIONAL:
            return list(proportional_schedule(Q, self.spec.schedule_set, rng).sigma), None
        if kind == BACK_PRESSURE:
            q = np.asarray(Q, dtype=float)
            b = q - self._P @ q
            values = [x if x > 0 else 0.0 for x in b.tolist()]
            sigma = self._solver.solve(values, tie)
            return [s if v > 0 else 0 for s, v in zip(sigma, values)], None
        w = self._weights
        values = Q if w is None else [wi * q for wi, q in zip(w, Q)]
        return self._solver.solve(values, tie), None
