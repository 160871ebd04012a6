"""Discrete-time stochastic engine.

Each call to :meth:`Simulator.step` performs one time slot:

1. the policy picks a schedule from the current queue lengths;
2. service at each queue is capped by its content (excess is lost);
3. each granted unit completes the head job of the served class with
   probability ``p_k``; completed jobs draw their next class (or exit);
4. routed jobs join their new buffers in source-queue order, then external
   arrivals join, so nothing is served in the slot it arrives;
5. counters are updated and time advances.

Queue buffers are stored run-length encoded (``[class, count]`` runs in
arrival order), which keeps FIFO order within and across classes without a
record per job.  Single-class queues only need their length.
"""

from __future__ import annotations

import csv
import io
import json
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .network import NetworkSpec
from .policy import Policy, PolicyConfig

STREAMS = ("arrivals", "service", "routing", "policy")
RELEASE_CHECK_EVERY = 10_000
_BLOCK = 4096


class ConservationError(AssertionError):
    """Queue contents disagree with the cumulative arrival and departure counts."""


class UniformStream:
    """Buffered uniform(0, 1) draws from one numpy generator."""

    __slots__ = ("gen", "buf", "pos")

    def __init__(self, gen: np.random.Generator):
        self.gen = gen
        self.buf: list[float] = []
        self.pos = 0

    def next(self) -> float:
        if self.pos >= len(self.buf):
            self.buf = self.gen.random(_BLOCK).tolist()
            self.pos = 0
        u = self.buf[self.pos]
        self.pos += 1
        return u


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.Generator(np.random.PCG64(ss)) for name, ss in zip(STREAMS, children)}


@dataclass
class SimState:
    t: int
    queue_len: list[int]
    class_len: list[int]
    runs: list[deque | None]
    initial_class_len: list[int]
    E: list[int]
    A: list[int]
    D: list[int]
    Pi: list[int]
    rng: dict[str, UniformStream]
    route_counts: np.ndarray | None = None

    @property
    def total(self) -> int:
        return sum(self.queue_len)


def initial_state(
    spec: NetworkSpec,
    counts: Mapping[str, int] | Sequence[int] | None = None,
    seed: int = 0,
) -> SimState:
    """Build a starting state.

    ``counts`` maps queue or class ids to job counts (jobs given by queue id
    go to that queue's first class), or is a per-class sequence.
    """
    nk = spec.n_classes
    per_class = [0] * nk
    if counts is None:
        pass
    elif isinstance(counts, Mapping):
        for key, n in counts.items():
            if key in spec.classes:
                per_class[spec.class_index(key)] += int(n)
            elif key in spec.queues:
                per_class[spec.classes_of(spec.queue_index(key))[0]] += int(n)
            else:
                raise KeyError(f"unknown queue or class {key!r} in initial condition")
    else:
        if len(counts) == nk:
            per_class = [int(x) for x in counts]
        elif len(counts) == spec.n_queues:
            for j, n in enumerate(counts):
                per_class[spec.classes_of(j)[0]] += int(n)
        else:
            raise ValueError(f"initial vector has length {len(counts)}; expected {nk} or {spec.n_queues}")
    if any(x < 0 for x in per_class):
        raise ValueError("initial job counts must be nonnegative")

    queue_len = [0] * spec.n_queues
    for k, n in enumerate(per_class):
        queue_len[spec.class_queue[k]] += n
    runs: list[deque | None] = []
    for j in range(spec.n_queues):
        ks = spec.classes_of(j)
        if len(ks) == 1:
            runs.append(None)
        else:
            runs.append(deque([k, per_class[k]] for k in ks if per_class[k] > 0))
    return SimState(
        t=0,
        queue_len=queue_len,
        class_len=list(per_class),
        runs=runs,
        initial_class_len=list(per_class),
        E=[0] * nk,
        A=[0] * nk,
        D=[0] * nk,
        Pi=[0] * spec.n_queues,
        rng={name: UniformStream(g) for name, g in make_streams(seed).items()},
        route_counts=np.zeros((nk, nk + 1), dtype=np.int64),
    )


def _remove_head(runs: deque, n: int) -> list[tuple[int, int]]:
    """Pop ``n`` jobs from the front of a run-length buffer; returns (class, count) removed."""
    out = []
    while n > 0:
        run = runs[0]
        take = run[1] if run[1] <= n else n
        out.append((run[0], take))
        run[1] -= take
        n -= take
        if run[1] == 0:
            runs.popleft()
    return out


def _remove_class(runs: deque, k: int, n: int) -> None:
    """Remove the ``n`` earliest jobs of class ``k``."""
    i = 0
    while n > 0:
        run = runs[i]
        if run[0] == k:
            take = run[1] if run[1] <= n else n
            run[1] -= take
            n -= take
            if run[1] == 0:
                del runs[i]
                continue
        i += 1


def _append(runs: deque, k: int, n: int) -> None:
    if runs and runs[-1][0] == k:
        runs[-1][1] += n
    else:
        runs.append([k, n])


class Simulator:
    """Runs one network under one policy; owns no state beyond compiled lookups."""

    def __init__(self, spec: NetworkSpec, policy_config: PolicyConfig, debug: bool = False):
        self.spec = spec
        self.policy = Policy(policy_config, spec)
        self.debug = debug
        nk = spec.n_classes
        self.service = list(spec.service)
        self.class_queue = list(spec.class_queue)
        self.single_class = [len(spec.classes_of(j)) == 1 for j in range(spec.n_queues)]
        self.queue_class = [spec.classes_of(j)[0] for j in range(spec.n_queues)]
        # routing rows as (deterministic destination or None, cumulative table)
        P = spec.routing
        self.route_fixed: list[int | None] = []
        self.route_cum: list[tuple[list[float], list[int]]] = []
        for k in range(nk):
            dests = [int(d) for d in np.flatnonzero(P[k])]
            probs = [float(P[k, d]) for d in dests]
            exit_p = 1.0 - sum(probs)
            if exit_p <= 1e-15 and len(dests) == 1:
                self.route_fixed.append(dests[0])
            elif not dests:
                self.route_fixed.append(-1)
            else:
                self.route_fixed.append(None)
            cum, acc = [], 0.0
            for pr in probs:
                acc += pr
                cum.append(acc)
            self.route_cum.append((cum, dests))
        self.streams = []
        for s in spec.arrivals:
            ks = [k for k, _ in s.targets]
            ws = [w for _, w in s.targets]
            uniform = len(set(ws)) == 1
            cum = list(np.cumsum(ws))
            self.streams.append((s.rate, ks, uniform, cum))

    # -- one slot -------------------------------------------------------
    def step(self, st: SimState) -> SimState:
        streams = st.rng
        spec = self.spec
        q, qt, runs = st.queue_len, st.class_len, st.runs
        sigma, split = self.policy.decide(q, qt, streams["policy"].gen)

        svc_u = streams["service"]
        routed: list[int] = []
        route_counts = st.route_counts
        D = st.D
        for j, s in enumerate(sigma):
            if s <= 0 or q[j] == 0:
                continue
            units = s if s < q[j] else q[j]
            st.Pi[j] += units
            if self.single_class[j]:
                k = self.queue_class[j]
                p = self.service[k]
                if p >= 1.0:
                    done = units
                else:
                    done = 0
                    for _ in range(units):
                        if svc_u.next() < p:
                            done += 1
                if done:
                    q[j] -= done
                    qt[k] -= done
                    D[k] += done
                    self._route(k, done, routed, streams, route_counts)
            elif split is None:
                self._serve_fifo(j, units, runs[j], st, routed, streams)
            else:
                for k in spec.classes_of(j):
                    sk = split[k]
                    if sk <= 0 or qt[k] == 0:
                        continue
                    n = sk if sk < qt[k] else qt[k]
                    p = self.service[k]
                    if p >= 1.0:
                        done = n
                    else:
                        done = sum(1 for _ in range(n) if svc_u.next() < p)
                    if done:
                        _remove_class(runs[j], k, done)
                        q[j] -= done
                        qt[k] -= done
                        D[k] += done
                        self._route(k, done, routed, streams, route_counts)

        A = st.A
        for k in routed:
            j = self.class_queue[k]
            q[j] += 1
            qt[k] += 1
            A[k] += 1
            if runs[j] is not None:
                _append(runs[j], k, 1)

        arr_u = streams["arrivals"]
        for rate, ks, uniform, cum in self.streams:
            if rate < 1.0 and arr_u.next() >= rate:
                continue
            if len(ks) == 1:
                k = ks[0]
            elif uniform:
                k = ks[int(arr_u.next() * len(ks))]
            else:
                u = arr_u.next() * cum[-1]
                k = ks[-1]
                for kk, c in zip(ks, cum):
                    if u < c:
                        k = kk
                        break
            j = self.class_queue[k]
            q[j] += 1
            qt[k] += 1
            A[k] += 1
            st.E[k] += 1
            if runs[j] is not None:
                _append(runs[j], k, 1)

        st.t += 1
        if self.debug or st.t % RELEASE_CHECK_EVERY == 0:
            self.check_conservation(st)
        return st

    def _serve_fifo(self, j, units, buf, st, routed, streams):
        q, qt, D = st.queue_len, st.class_len, st.D
        svc = self.service
        if all(svc[k] >= 1.0 for k in self.spec.classes_of(j)):
            removed = _remove_head(buf, units)
        else:
            # the first `units` jobs each get one unit; completions leave, the rest keep their order
            svc_u = streams["service"]
            removed = []
            left = units
            for run in buf:
                if left == 0:
                    break
                k, c = run
                n = c if c < left else left
                left -= n
                done = sum(1 for _ in range(n) if svc_u.next() < svc[k])
                if done:
                    run[1] -= done
                    removed.append((k, done))
            if removed:
                kept = [r for r in buf if r[1] > 0]
                buf.clear()
                for k, c in kept:
                    _append(buf, k, c)
        for k, n in removed:
            q[j] -= n
            qt[k] -= n
            D[k] += n
            self._route(k, n, routed, streams, st.route_counts)

    def _route(self, k, n, routed, streams, route_counts):
        fixed = self.route_fixed[k]
        if fixed is not None:
            if fixed >= 0:
                routed.extend([fixed] * n)
                route_counts[k, fixed] += n
            else:
                route_counts[k, -1] += n
            return
        cum, dests = self.route_cum[k]
        ru = streams["routing"]
        for _ in range(n):
            u = ru.next()
            dest = -1
            for c, d in zip(cum, dests):
                if u < c:
                    dest = d
                    break
            if dest >= 0:
                routed.append(dest)
                route_counts[k, dest] += 1
            else:
                route_counts[k, -1] += 1

    def check_conservation(self, st: SimState) -> None:
        nq = self.spec.n_queues
        for k in range(self.spec.n_classes):
            expect = st.initial_class_len[k] + st.A[k] - st.D[k]
            if expect != st.class_len[k] or st.class_len[k] < 0:
                raise ConservationError(
                    f"t={st.t} class {self.spec.classes[k]}: length {st.class_len[k]} != Q(0)+A-D = {expect}"
                )
        sums = [0] * nq
        for k, j in enumerate(self.class_queue):
            sums[j] += st.class_len[k]
        if sums != st.queue_len:
            raise ConservationError(f"t={st.t}: queue lengths {st.queue_len} disagree with class sums {sums}")
        for j, buf in enumerate(st.runs):
            if buf is not None and sum(r[1] for r in buf) != st.queue_len[j]:
                raise ConservationError(f"t={st.t} queue {self.spec.queues[j]}: buffer size mismatch")


# ---- trajectories -------------------------------------------------------

@dataclass
class Trajectory:
    times: np.ndarray
    queue_len: np.ndarray
    queue_ids: tuple[str, ...]
    class_len: np.ndarray | None = None
    class_ids: tuple[str, ...] = ()
    seed: int | None = None
    wall_time: float = 0.0
    final_state: SimState | None = field(default=None, repr=False)

    @property
    def total(self) -> np.ndarray:
        return self.queue_len.sum(axis=1)

    def column(self, qid: str) -> np.ndarray:
        return self.queue_len[:, self.queue_ids.index(qid)]

    def component_sum(self, qids: Sequence[str]) -> np.ndarray:
        idx = [self.queue_ids.index(q) for q in qids]
        return self.queue_len[:, idx].sum(axis=1)

    def thin(self, every: int) -> "Trajectory":
        keep = np.flatnonzero(self.times % every == 0)
        if keep[-1] != len(self.times) - 1:
            keep = np.append(keep, len(self.times) - 1)
        return Trajectory(
            self.times[keep], self.queue_len[keep], self.queue_ids,
            None if self.class_len is None else self.class_len[keep], self.class_ids, self.seed,
        )

    def to_csv(self, include_classes: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["t", *self.queue_ids, "total"]
        with_cls = include_classes and self.class_len is not None
        if with_cls:
            header += list(self.class_ids)
        w.writerow(header)
        tot = self.total
        for i, t in enumerate(self.times.tolist()):
            row = [t, *self.queue_len[i].tolist(), int(tot[i])]
            if with_cls:
                row += self.class_len[i].tolist()
            w.writerow(row)
        return buf.getvalue()

    def write_csv(self, path: str | Path, include_classes: bool = False) -> None:
        Path(path).write_text(self.to_csv(include_classes))

    def summary(self, steps: int) -> dict:
        tot = self.total
        return {
            "schema_version": 1,
            "final_queue": dict(zip(self.queue_ids, self.queue_len[-1].tolist())),
            "final_total": int(tot[-1]),
            "min_total": int(tot.min()),
            "max_total": int(tot.max()),
            "seed": self.seed,
            "steps": steps,
            "wall_time_s": self.wall_time,
        }


def run(
    spec: NetworkSpec,
    policy_config: PolicyConfig,
    initial: SimState | Mapping[str, int] | Sequence[int] | None,
    steps: int,
    record_every: int = 1,
    seed: int = 0,
    debug: bool = False,
    record_classes: bool | None = None,
) -> Trajectory:
    """Simulate ``steps`` slots, sampling at 0, every ``record_every`` slots, and at the end."""
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if record_every < 1:
        raise ValueError("record_every must be at least 1")
    st = initial if isinstance(initial, SimState) else initial_state(spec, initial, seed)
    if record_classes is None:
        record_classes = spec.is_multiclass
    sim = Simulator(spec, policy_config, debug=debug)

    t0 = st.t
    n_samples = steps // record_every + 2
    times = np.empty(n_samples, dtype=np.int64)
    ql = np.empty((n_samples, spec.n_queues), dtype=np.int64)
    cl = np.empty((n_samples, spec.n_classes), dtype=np.int64) if record_classes else None
    n = 0

    def record():
        nonlocal n
        times[n] = st.t
        ql[n] = st.queue_len
        if cl is not None:
            cl[n] = st.class_len
        n += 1

    wall = time.perf_counter()
    record()
    step = sim.step
    for i in range(1, steps + 1):
        step(st)
        if i % record_every == 0 or i == steps:
            record()
    sim.check_conservation(st)
    wall = time.perf_counter() - wall
    return Trajectory(
        times[:n].copy(), ql[:n].copy(), spec.queues,
        None if cl is None else cl[:n].copy(), spec.classes, seed, wall, st,
    )


def write_summary(traj: Trajectory, steps: int, path: str | Path, extra: Mapping | None = None) -> None:
    doc = traj.summary(steps)
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))
