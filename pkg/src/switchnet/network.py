"""Domain types for discrete-time switched queueing networks.

A network is described by a :class:`NetworkSpec`: queues, the job classes
living at each queue, Bernoulli external arrival streams, geometric service
parameters per class, a substochastic routing matrix over classes and the
set of feasible schedules.  Schedule sets come in two forms:

* ``explicit`` -- a finite, downward-closed list of integer vectors;
* ``constraints`` -- resource rows ``<c, sigma> <= bound`` over nonnegative
  integer vectors.  This form is never enumerated during simulation.

Queue and class identifiers are strings; internally everything is indexed
densely in declaration order.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from math import comb
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

FEAS_TOL = 1e-9

EXPLICIT = "explicit"
CONSTRAINTS = "constraints"


class ScheduleExplosionError(RuntimeError):
    """Raised when enumerating a schedule set would exceed the allowed size."""


class SpecError(ValueError):
    """Raised when a network description cannot be constructed."""


@dataclass(frozen=True)
class ConstraintRow:
    coeffs: tuple[float, ...]
    bound: float = 1.0

    @property
    def support(self) -> tuple[int, ...]:
        return tuple(j for j, c in enumerate(self.coeffs) if c > 0)

    def normalized(self) -> tuple[float, ...]:
        """Coefficients rescaled so that the bound is 1."""
        return tuple(c / self.bound for c in self.coeffs)


@dataclass(frozen=True)
class ScheduleSet:
    """Feasible service vectors, either listed or given by resource rows."""

    form: str
    dim: int
    schedules: tuple[tuple[int, ...], ...] = ()
    rows: tuple[ConstraintRow, ...] = ()

    @classmethod
    def explicit(cls, schedules: Iterable[Sequence[int]]) -> "ScheduleSet":
        sched = tuple(sorted({tuple(int(x) for x in s) for s in schedules}))
        if not sched:
            raise SpecError("explicit schedule set must contain at least one schedule")
        dims = {len(s) for s in sched}
        if len(dims) != 1:
            raise SpecError(f"explicit schedules have mixed dimensions {sorted(dims)}")
        return cls(EXPLICIT, dims.pop(), schedules=sched)

    @classmethod
    def from_rows(cls, rows: Iterable[Sequence[float] | ConstraintRow], dim: int | None = None) -> "ScheduleSet":
        built = []
        for r in rows:
            if isinstance(r, ConstraintRow):
                built.append(r)
            else:
                built.append(ConstraintRow(tuple(float(c) for c in r), 1.0))
        if not built:
            raise SpecError("constraint schedule set needs at least one row")
        dims = {len(r.coeffs) for r in built}
        if len(dims) != 1:
            raise SpecError(f"constraint rows have mixed dimensions {sorted(dims)}")
        d = dims.pop()
        if dim is not None and dim != d:
            raise SpecError(f"rows have dimension {d}, expected {dim}")
        return cls(CONSTRAINTS, d, rows=tuple(built))

    @property
    def is_explicit(self) -> bool:
        return self.form == EXPLICIT

    def contains(self, sigma: Sequence[int]) -> bool:
        if len(sigma) != self.dim or any(s < 0 for s in sigma):
            return False
        if self.is_explicit:
            return tuple(int(s) for s in sigma) in set(self.schedules)
        for row in self.rows:
            if sum(c * s for c, s in zip(row.coeffs, sigma)) > row.bound * (1 + FEAS_TOL):
                return False
        return True

    def dominated_by_member(self, sigma: Sequence[int]) -> bool:
        if self.is_explicit:
            return any(all(x <= y for x, y in zip(sigma, s)) for s in self.schedules)
        return self.contains(sigma)

    def has_disjoint_supports(self) -> bool:
        if self.is_explicit:
            return False
        seen: set[int] = set()
        for row in self.rows:
            sup = set(row.support)
            if seen & sup:
                return False
            seen |= sup
        return True

    def uncovered_queues(self) -> list[int]:
        """Queues no row limits (their feasible service would be unbounded)."""
        if self.is_explicit:
            return []
        covered = set()
        for row in self.rows:
            covered.update(row.support)
        return [j for j in range(self.dim) if j not in covered]

    def downward_closure(self) -> "ScheduleSet":
        if not self.is_explicit:
            return self
        out = set()
        for s in self.schedules:
            out.update(itertools.product(*(range(x + 1) for x in s)))
        return ScheduleSet.explicit(out)

    def to_json(self, queue_ids: Sequence[str] | None = None) -> dict:
        ids = list(queue_ids) if queue_ids is not None else [str(j) for j in range(self.dim)]
        if self.is_explicit:
            return {"form": EXPLICIT, "schedules": [list(s) for s in self.schedules]}
        return {
            "form": CONSTRAINTS,
            "rows": [
                {"coeffs": {ids[j]: c for j, c in enumerate(r.coeffs) if c != 0}, "bound": r.bound}
                for r in self.rows
            ],
        }

    @classmethod
    def from_json(cls, doc: Mapping, queue_ids: Sequence[str]) -> "ScheduleSet":
        index = {q: j for j, q in enumerate(queue_ids)}
        form = doc.get("form")
        if form == EXPLICIT:
            return cls.explicit(doc["schedules"])
        if form == CONSTRAINTS:
            rows = []
            for r in doc["rows"]:
                coeffs = [0.0] * len(queue_ids)
                for q, c in r["coeffs"].items():
                    if q not in index:
                        raise SpecError(f"constraint references unknown queue {q!r}")
                    coeffs[index[q]] = float(c)
                rows.append(ConstraintRow(tuple(coeffs), float(r.get("bound", 1.0))))
            return cls.from_rows(rows, dim=len(queue_ids))
        raise SpecError(f"unknown schedule_set form {form!r}")


@dataclass(frozen=True)
class Schedule:
    sigma: tuple[int, ...]
    class_split: tuple[int, ...] | None = None


@dataclass(frozen=True)
class ArrivalStream:
    """At most one external job per step with probability ``rate``.

    The arriving job joins class ``k`` with probability ``weights[k]``; a
    stream with one target is an ordinary per-class Bernoulli stream.
    """

    rate: float
    targets: tuple[tuple[int, float], ...]


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    queues: tuple[str, ...]
    classes: tuple[str, ...]
    class_queue: tuple[int, ...]
    arrivals: tuple[ArrivalStream, ...]
    service: tuple[float, ...]
    routing: np.ndarray
    schedule_set: ScheduleSet
    name: str = ""
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        r = np.array(self.routing, dtype=float, copy=True)
        if r.shape != (len(self.classes), len(self.classes)):
            raise SpecError(f"routing must be {len(self.classes)}x{len(self.classes)}, got {r.shape}")
        r.setflags(write=False)
        object.__setattr__(self, "routing", r)

    @property
    def n_queues(self) -> int:
        return len(self.queues)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def is_multiclass(self) -> bool:
        return self.n_classes != self.n_queues

    @property
    def arrival_rate(self) -> np.ndarray:
        a = np.zeros(self.n_classes)
        for s in self.arrivals:
            for k, w in s.targets:
                a[k] += s.rate * w
        return a

    @property
    def exit_prob(self) -> np.ndarray:
        return 1.0 - self.routing.sum(axis=1)

    def classes_of(self, j: int) -> list[int]:
        return [k for k, q in enumerate(self.class_queue) if q == j]

    def queue_index(self, qid: str) -> int:
        return self.queues.index(qid)

    def class_index(self, cid: str) -> int:
        return self.classes.index(cid)

    def queue_routing(self) -> np.ndarray:
        """Routing between queues; only meaningful for single-class networks."""
        if self.is_multiclass:
            raise SpecError("queue-level routing is defined for single-class networks only")
        order = np.array(self.class_queue)
        P = np.zeros((self.n_queues, self.n_queues))
        P[np.ix_(order, order)] = self.routing
        return P

    # ---- JSON -----------------------------------------------------------
    def to_json(self) -> dict:
        doc = {
            "schema_version": 1,
            "queues": list(self.queues),
            "classes": [{"id": c, "queue": self.queues[q]} for c, q in zip(self.classes, self.class_queue)],
            "arrivals": [
                {"rate": s.rate, "classes": {self.classes[k]: w for k, w in s.targets}} for s in self.arrivals
            ],
            "service": {c: p for c, p in zip(self.classes, self.service)},
            "routing": {
                self.classes[k]: {self.classes[k2]: float(self.routing[k, k2]) for k2 in np.flatnonzero(self.routing[k])}
                for k in range(self.n_classes)
                if self.routing[k].any()
            },
            "schedule_set": self.schedule_set.to_json(self.queues),
        }
        if self.name:
            doc["name"] = self.name
        return doc

    @classmethod
    def from_json(cls, doc: Mapping) -> "NetworkSpec":
        queues = tuple(doc["queues"])
        raw_classes = doc.get("classes")
        if raw_classes is None:
            classes, owners = queues, queues
        else:
            classes = tuple(c["id"] if isinstance(c, Mapping) else c for c in raw_classes)
            owners = tuple(c["queue"] if isinstance(c, Mapping) else c for c in raw_classes)
        qidx = {q: j for j, q in enumerate(queues)}
        kidx = {c: k for k, c in enumerate(classes)}
        for o in owners:
            if o not in qidx:
                raise SpecError(f"class owner {o!r} is not a declared queue")
        class_queue = tuple(qidx[o] for o in owners)

        streams = []
        arr = doc.get("arrivals", {})
        if isinstance(arr, Mapping):
            for c, rate in arr.items():
                streams.append(ArrivalStream(float(rate), ((kidx[c], 1.0),)))
        else:
            for s in arr:
                streams.append(
                    ArrivalStream(float(s["rate"]), tuple((kidx[c], float(w)) for c, w in s["classes"].items()))
                )

        svc = doc.get("service", {})
        service = tuple(float(svc.get(c, 1.0)) for c in classes)

        P = np.zeros((len(classes), len(classes)))
        for c, row in doc.get("routing", {}).items():
            for c2, p in row.items():
                P[kidx[c], kidx[c2]] = float(p)
        sset = ScheduleSet.from_json(doc["schedule_set"], queues)
        return cls(queues, classes, class_queue, tuple(streams), service, P, sset, name=doc.get("name", ""))

    def dump(self, path: str | Path, extra: Mapping | None = None) -> None:
        doc = self.to_json()
        if extra:
            doc.update(extra)
        Path(path).write_text(json.dumps(doc, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "NetworkSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


def single_class_spec(
    queues: Sequence[str],
    arrivals: Sequence[ArrivalStream] | Mapping[str, float],
    service: Sequence[float] | float,
    routing: np.ndarray,
    schedule_set: ScheduleSet,
    name: str = "",
) -> NetworkSpec:
    """Convenience constructor: one class per queue, class id = queue id."""
    queues = tuple(queues)
    if isinstance(arrivals, Mapping):
        streams = tuple(ArrivalStream(float(r), ((queues.index(q), 1.0),)) for q, r in arrivals.items() if r > 0)
    else:
        streams = tuple(arrivals)
    if isinstance(service, (int, float)):
        service = (float(service),) * len(queues)
    return NetworkSpec(
        queues, queues, tuple(range(len(queues))), streams, tuple(float(p) for p in service),
        np.asarray(routing, dtype=float), schedule_set, name=name,
    )


# ---- validation ---------------------------------------------------------

def validate_spec(spec: NetworkSpec) -> list[str]:
    """Return every invariant violation as a readable message; ``[]`` means valid."""
    out: list[str] = []
    nq, nk = spec.n_queues, spec.n_classes

    for label, ids in (("queue", spec.queues), ("class", spec.classes)):
        dupes = sorted({x for x in ids if ids.count(x) > 1})
        if dupes:
            out.append(f"duplicate {label} ids: {dupes}")
    if len(spec.class_queue) != nk:
        out.append("class_queue length differs from number of classes")
    for j, q in enumerate(spec.queues):
        if j not in spec.class_queue:
            out.append(f"queue {q}: has no class")
    for k, j in enumerate(spec.class_queue):
        if not 0 <= j < nq:
            out.append(f"class {spec.classes[k]}: owner index {j} out of range")

    for i, s in enumerate(spec.arrivals):
        if not 0.0 <= s.rate <= 1.0:
            out.append(f"arrival stream {i}: rate {s.rate} outside [0, 1]")
        tot = sum(w for _, w in s.targets)
        if any(w < 0 for _, w in s.targets) or abs(tot - 1.0) > 1e-9:
            out.append(f"arrival stream {i}: class weights must be nonnegative and sum to 1 (got {tot})")
        for k, _ in s.targets:
            if not 0 <= k < nk:
                out.append(f"arrival stream {i}: class index {k} out of range")
    for k, a in enumerate(spec.arrival_rate):
        if a > 1.0 + 1e-12:
            out.append(f"class {spec.classes[k]}: total external rate {a} exceeds 1 per step")

    for k, p in enumerate(spec.service):
        if not 0.0 < p <= 1.0:
            out.append(f"class {spec.classes[k]}: service probability {p} outside (0, 1]")

    P = spec.routing
    # one message per bad row; an entry above 1 always shows up as a row sum above 1
    for k in range(nk):
        rs = P[k].sum()
        if np.any(P[k] < 0):
            out.append(f"routing row {spec.classes[k]}: negative entries")
        elif rs > 1.0 + 1e-12:
            out.append(f"routing row {spec.classes[k]}: row sum {rs:g} exceeds 1")
    if nk and not out_of_range_rows(P):
        radius = max(abs(np.linalg.eigvals(P))) if nk else 0.0
        if radius >= 1.0 - 1e-12:
            out.append(f"routing spectral radius {radius:.6g} >= 1: network is not open")

    out.extend(validate_schedule_set(spec.schedule_set, spec.queues))
    return out


def out_of_range_rows(P: np.ndarray) -> bool:
    return bool(np.any(P < 0) or np.any(P.sum(axis=1) > 1 + 1e-12))


def validate_schedule_set(sset: ScheduleSet, queue_ids: Sequence[str] | None = None) -> list[str]:
    ids = list(queue_ids) if queue_ids is not None else [str(j) for j in range(sset.dim)]
    out: list[str] = []
    if queue_ids is not None and sset.dim != len(ids):
        out.append(f"schedule set dimension {sset.dim} differs from {len(ids)} queues")
        return out
    if sset.is_explicit:
        members = set(sset.schedules)
        for s in sset.schedules:
            if any(x < 0 for x in s):
                out.append(f"schedule {s}: negative entry")
        if (0,) * sset.dim not in members:
            out.append("explicit schedule set lacks the zero schedule")
        # closure under single-unit decrements implies full downward closure
        for s in sset.schedules:
            for j, x in enumerate(s):
                if x > 0:
                    lower = s[:j] + (x - 1,) + s[j + 1:]
                    if lower not in members:
                        out.append(f"downward closure: {s} is present but {lower} is missing")
    else:
        for i, row in enumerate(sset.rows):
            if any(c < 0 for c in row.coeffs):
                out.append(f"constraint row {i}: negative coefficient")
            if not row.bound > 0:
                out.append(f"constraint row {i}: bound must be positive")
        unc = sset.uncovered_queues()
        if unc:
            out.append(f"queues {[ids[j] for j in unc]} are not limited by any constraint (unbounded service)")
    return out


# ---- enumeration --------------------------------------------------------

def _row_groups(coeffs: Sequence[float]) -> list[tuple[float, list[int]]]:
    groups: dict[float, list[int]] = {}
    for j, c in enumerate(coeffs):
        if c > 0:
            groups.setdefault(c, []).append(j)
    return sorted(groups.items(), key=lambda g: -g[0])


def _fit(budget: float, c: float) -> int:
    return int(math.floor(budget / c + FEAS_TOL))


def count_maximal_schedules(sset: ScheduleSet) -> int:
    """Number of maximal schedules of a disjoint-support constraint set, without listing them."""
    if sset.is_explicit:
        return len(_maximal_explicit(sset.schedules))
    if not sset.has_disjoint_supports():
        raise ValueError("closed-form count requires disjoint constraint supports")
    total = 1
    for row in sset.rows:
        groups = _row_groups(row.normalized())
        cmin = min(c for c, _ in groups)
        row_count = 0

        def rec(g: int, budget: float, ways: int):
            nonlocal row_count
            if g == len(groups):
                if budget < cmin * (1 - FEAS_TOL):
                    row_count += ways
                return
            c, members = groups[g]
            m = len(members)
            for n in range(_fit(budget, c) + 1):
                rec(g + 1, budget - n * c, ways * comb(n + m - 1, m - 1))

        rec(0, 1.0, 1)
        total *= row_count
    return total


def _maximal_explicit(schedules: Iterable[tuple[int, ...]]) -> list[tuple[int, ...]]:
    sched = list(schedules)
    out = []
    for s in sched:
        if not any(t != s and all(x <= y for x, y in zip(s, t)) for t in sched):
            out.append(s)
    return out


def enumerate_maximal_schedules(sset: ScheduleSet, dim_limit: int = 10_000) -> list[tuple[int, ...]]:
    """All undominated feasible integer vectors, by exhaustive scan.

    Intended as a brute-force oracle for small sets.  Raises
    :class:`ScheduleExplosionError` when the result would exceed ``dim_limit``.
    """
    if sset.is_explicit:
        out = _maximal_explicit(sset.schedules)
        if len(out) > dim_limit:
            raise ScheduleExplosionError(f"{len(out)} maximal schedules exceed limit {dim_limit}")
        return sorted(out)
    if sset.uncovered_queues():
        raise ScheduleExplosionError("schedule set is unbounded: some queue has no constraint")
    if sset.has_disjoint_supports():
        n = count_maximal_schedules(sset)
        if n > dim_limit:
            raise ScheduleExplosionError(f"{n} maximal schedules exceed limit {dim_limit}")

    rows = [row.normalized() for row in sset.rows]
    dim = sset.dim
    scan_cap = 50 * dim_limit
    feasible: list[tuple[int, ...]] = []
    cur = [0] * dim
    used = [0.0] * len(rows)

    def room(j: int) -> int:
        best = None
        for r, coeffs in enumerate(rows):
            c = coeffs[j]
            if c > 0:
                n = _fit(1.0 - used[r], c)
                best = n if best is None else min(best, n)
        return best if best is not None else 0

    def rec(j: int):
        if j == dim:
            feasible.append(tuple(cur))
            if len(feasible) > scan_cap:
                raise ScheduleExplosionError(f"more than {scan_cap} feasible points scanned")
            return
        for n in range(room(j) + 1):
            cur[j] = n
            for r, coeffs in enumerate(rows):
                used[r] += n * coeffs[j]
            rec(j + 1)
            for r, coeffs in enumerate(rows):
                used[r] -= n * coeffs[j]
        cur[j] = 0

    rec(0)
    fset = set(feasible)
    maximal = []
    for s in feasible:
        if all(s[:j] + (s[j] + 1,) + s[j + 1:] not in fset for j in range(dim)):
            maximal.append(s)
    if len(maximal) > dim_limit:
        raise ScheduleExplosionError(f"{len(maximal)} maximal schedules exceed limit {dim_limit}")
    return sorted(maximal)


def scale_schedule_set(sset: ScheduleSet, m: Sequence[float]) -> ScheduleSet:
    """Stretch every schedule componentwise by ``m``.

    Constraint rows divide their coefficients by ``m``.  Explicit sets map
    each member to its image, which needs integer ``m`` and is not in general
    downward closed (use :meth:`ScheduleSet.downward_closure`).
    """
    m = [float(x) for x in m]
    if len(m) != sset.dim:
        raise ValueError(f"scale vector has length {len(m)}, set has dimension {sset.dim}")
    if any(not x > 0 for x in m):
        raise ValueError("scale entries must be positive")
    if sset.is_explicit:
        if any(x != int(x) for x in m):
            raise ValueError("explicit sets only scale by integer factors")
        mi = [int(x) for x in m]
        return ScheduleSet.explicit(tuple(s * f for s, f in zip(sched, mi)) for sched in sset.schedules)
    rows = tuple(ConstraintRow(tuple(c / f for c, f in zip(r.coeffs, m)), r.bound) for r in sset.rows)
    return ScheduleSet(CONSTRAINTS, sset.dim, rows=rows)
