"""Constructors for the standard example networks.

Two-component networks come with :class:`ComponentTags`, which name each
component's hub queue and its spread queues so trajectory analysis can find
the drain/refill cycles.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .network import ArrivalStream, ConstraintRow, NetworkSpec, ScheduleSet, single_class_spec
from .policy import LQFS_BATCH, PolicyConfig

HUB = "hub"
SPREAD = "spread"


@dataclass(frozen=True)
class ComponentTags:
    """Queue id -> (component label, role)."""

    labels: tuple[tuple[str, str, str], ...]

    @classmethod
    def from_map(cls, mapping: Mapping[str, tuple[str, str]]) -> "ComponentTags":
        return cls(tuple((q, c, r) for q, (c, r) in mapping.items()))

    def components(self) -> list[str]:
        out: list[str] = []
        for _, c, _ in self.labels:
            if c not in out:
                out.append(c)
        return out

    def hub(self, component: str) -> str:
        hubs = [q for q, c, r in self.labels if c == component and r == HUB]
        if len(hubs) != 1:
            raise ValueError(f"component {component!r} has {len(hubs)} hubs")
        return hubs[0]

    def spread(self, component: str) -> list[str]:
        return [q for q, c, r in self.labels if c == component and r == SPREAD]

    def members(self, component: str) -> list[str]:
        return [q for q, c, _ in self.labels if c == component]

    def to_json(self) -> dict:
        return {q: {"component": c, "role": r} for q, c, r in self.labels}

    @classmethod
    def from_json(cls, doc: Mapping) -> "ComponentTags":
        return cls(tuple((q, v["component"], v["role"]) for q, v in doc.items()))


def _check_rate(a) -> float:
    a = float(a)
    if not 0.0 < a < 1.0:
        raise ValueError(f"arrival rate must lie in (0, 1), got {a}")
    return a


def _check_counts(nu, J) -> tuple[int, int]:
    if int(nu) != nu or int(J) != J or nu < 1 or J < 1:
        raise ValueError(f"nu and J must be positive integers, got nu={nu}, J={J}")
    return int(nu), int(J)


def _two_component_ids(J: int) -> tuple[list[str], list[str]]:
    return [f"A{j}" for j in range(J + 1)], [f"B{j}" for j in range(J + 1)]


def build_instability_network(a, nu, J, dispatch: str = "uniform") -> tuple[NetworkSpec, ComponentTags]:
    """Two components, each a hub and ``J`` spread queues.

    Spread jobs of one component move to the other component's hub; hub jobs
    leave.  Each component can serve its hub once or up to ``nu`` spread
    jobs per slot.  With ``dispatch="uniform"`` one arrival per component
    occurs with probability ``a`` and picks a spread queue uniformly; with
    ``"independent"`` every spread queue gets its own ``a/J`` stream.
    """
    a = _check_rate(a)
    nu, J = _check_counts(nu, J)
    A, B = _two_component_ids(J)
    queues = A + B
    n = len(queues)
    ix = {q: i for i, q in enumerate(queues)}

    if dispatch == "uniform":
        streams = [
            ArrivalStream(a, tuple((ix[q], 1.0 / J) for q in comp[1:])) for comp in (A, B)
        ]
    elif dispatch == "independent":
        streams = [ArrivalStream(a / J, ((ix[q], 1.0),)) for comp in (A, B) for q in comp[1:]]
    else:
        raise ValueError(f"unknown dispatch {dispatch!r}")

    P = np.zeros((n, n))
    for j in range(1, J + 1):
        P[ix[f"A{j}"], ix["B0"]] = 1.0
        P[ix[f"B{j}"], ix["A0"]] = 1.0

    rows = []
    for comp in (A, B):
        c = [0.0] * n
        c[ix[comp[0]]] = 1.0
        for q in comp[1:]:
            c[ix[q]] = 1.0 / nu
        rows.append(ConstraintRow(tuple(c), 1.0))
    spec = single_class_spec(queues, streams, 1.0, P, ScheduleSet.from_rows(rows), name="fig2")
    tags = ComponentTags.from_map(
        {q: (comp[0][0], HUB if i == 0 else SPREAD) for comp in (A, B) for i, q in enumerate(comp)}
    )
    return spec, tags


def build_lqfs_network(a, nu, J, dispatch: str = "uniform") -> tuple[NetworkSpec, ComponentTags, PolicyConfig]:
    """The two-component network paired with batch longest-queue weights ``(1, 1/nu, ...)``."""
    spec, tags = build_instability_network(a, nu, J, dispatch)
    nu, J = _check_counts(nu, J)
    hubs = {tags.hub(c) for c in tags.components()}
    w = tuple(1.0 if q in hubs else 1.0 / nu for q in spec.queues)
    spec = NetworkSpec(spec.queues, spec.classes, spec.class_queue, spec.arrivals, spec.service,
                       spec.routing, spec.schedule_set, name="lqfs")
    return spec, tags, PolicyConfig(kind=LQFS_BATCH, weights=w)


def build_tandem(J: int, a, capacities: Sequence[float] | None = None) -> NetworkSpec:
    """``J`` queues in series fed at rate ``a``; queue ``j`` serves up to ``capacities[j]`` per slot."""
    if int(J) != J or J < 1:
        raise ValueError(f"J must be a positive integer, got {J}")
    J = int(J)
    a = float(a)
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"arrival rate must lie in [0, 1], got {a}")
    caps = [1.0] * J if capacities is None else [float(c) for c in capacities]
    if len(caps) != J or any(c < 1 for c in caps):
        raise ValueError("need one capacity of at least 1 per queue")
    queues = [f"Q{j + 1}" for j in range(J)]
    P = np.zeros((J, J))
    for j in range(J - 1):
        P[j, j + 1] = 1.0
    rows = [ConstraintRow(tuple(1.0 if i == j else 0.0 for i in range(J)), caps[j]) for j in range(J)]
    arrivals = {queues[0]: a} if a > 0 else {}
    return single_class_spec(queues, arrivals, 1.0, P, ScheduleSet.from_rows(rows), name="tandem")


def _tree_nodes(tree: Mapping[str, Sequence[str]]) -> tuple[str, list[str]]:
    children = {c for kids in tree.values() for c in kids}
    roots = [n for n in tree if n not in children]
    if len(roots) != 1:
        raise ValueError(f"tree must have exactly one root, found {roots}")
    order, seen = [], set()
    # breadth-first order keeps levels contiguous
    frontier = [roots[0]]
    while frontier:
        nxt = []
        for n in frontier:
            if n in seen:
                raise ValueError(f"node {n!r} is reachable twice; not an out-tree")
            seen.add(n)
            order.append(n)
            nxt.extend(tree.get(n, ()))
        frontier = nxt
    return roots[0], order


def build_pure_branching(
    tree: Mapping[str, Sequence[str]],
    a,
    branch_probs: Mapping[tuple[str, str], float] | None = None,
    schedule: str = "per_level",
) -> NetworkSpec:
    """Out-tree of queues fed at the root.

    ``tree`` maps each node to its children.  Without ``branch_probs`` a
    finished job moves to each child with equal probability (leaves exit).
    ``schedule="per_level"`` lets the queues at each depth share one unit of
    service per slot; ``"independent"`` gives every queue its own unit.
    """
    a = float(a)
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"arrival rate must lie in [0, 1], got {a}")
    root, order = _tree_nodes(tree)
    ix = {q: i for i, q in enumerate(order)}
    n = len(order)
    P = np.zeros((n, n))
    depth = {root: 0}
    for parent in order:
        kids = list(tree.get(parent, ()))
        for c in kids:
            depth[c] = depth[parent] + 1
            if branch_probs is not None:
                P[ix[parent], ix[c]] = float(branch_probs.get((parent, c), 0.0))
            else:
                P[ix[parent], ix[c]] = 1.0 / len(kids)
    if schedule == "per_level":
        levels = sorted(set(depth.values()))
        rows = [
            ConstraintRow(tuple(1.0 if depth[q] == d else 0.0 for q in order), 1.0) for d in levels
        ]
    elif schedule == "independent":
        rows = [ConstraintRow(tuple(1.0 if i == j else 0.0 for i in range(n)), 1.0) for j in range(n)]
    else:
        raise ValueError(f"unknown schedule layout {schedule!r}")
    arrivals = {root: a} if a > 0 else {}
    return single_class_spec(order, arrivals, 1.0, P, ScheduleSet.from_rows(rows), name="branching")


# the twelve-queue tree used by the branching preset
BRANCHING_TREE: dict[str, list[str]] = {
    "A1": ["A11", "A12"],
    "A11": ["A111"],
    "A12": ["A121", "A122"],
    "A111": ["A1111", "A1112", "A1113"],
    "A121": ["A1211"],
    "A122": ["A1221", "A1222"],
}


def _rs_schedule(queues: Sequence[str], epsilon: float) -> ScheduleSet:
    ix = {q: i for i, q in enumerate(queues)}
    rows = []
    for comp in ("A", "B"):
        c = [0.0] * len(queues)
        c[ix[f"{comp}0"]] = epsilon
        c[ix[f"{comp}1"]] = epsilon**2
        rows.append(ConstraintRow(tuple(c), 1.0))
    return ScheduleSet.from_rows(rows)


def _rs_tags() -> ComponentTags:
    return ComponentTags.from_map({
        "A0": ("A", HUB), "A1": ("A", SPREAD), "B0": ("B", HUB), "B1": ("B", SPREAD),
    })


def _check_epsilon(epsilon) -> float:
    epsilon = float(epsilon)
    if not 0.0 < epsilon < 0.5:
        raise ValueError(f"epsilon must lie in (0, 1/2), got {epsilon}")
    return epsilon


def build_multiclass_rs(a, epsilon, K: int) -> tuple[NetworkSpec, ComponentTags]:
    """Four queues; the second queue of each side carries a chain of ``K`` classes.

    Jobs enter at A0 and B0 at rate ``a``.  A0 sends its jobs to the first
    class of B1 and B0 to the first class of A1; inside A1 (B1) class ``i``
    becomes class ``i + 1`` and class ``K`` leaves.  Per side,
    ``epsilon * sigma_0 + epsilon**2 * sigma_1 <= 1``.
    """
    a = float(a)
    if not 0.0 < a <= 1.0:
        raise ValueError(f"arrival rate must lie in (0, 1], got {a}")
    epsilon = _check_epsilon(epsilon)
    if int(K) != K or K < 1:
        raise ValueError(f"K must be a positive integer, got {K}")
    K = int(K)
    queues = ("A0", "A1", "B0", "B1")
    classes = ["A0"] + [f"A1_{i}" for i in range(1, K + 1)] + ["B0"] + [f"B1_{i}" for i in range(1, K + 1)]
    owner = {"A0": 0, "B0": 2}
    class_queue = tuple(owner.get(c, 1 if c.startswith("A1") else 3) for c in classes)
    kx = {c: k for k, c in enumerate(classes)}
    P = np.zeros((len(classes), len(classes)))
    P[kx["A0"], kx["B1_1"]] = 1.0
    P[kx["B0"], kx["A1_1"]] = 1.0
    for side in ("A1", "B1"):
        for i in range(1, K):
            P[kx[f"{side}_{i}"], kx[f"{side}_{i + 1}"]] = 1.0
    arrivals = (ArrivalStream(a, ((kx["A0"], 1.0),)), ArrivalStream(a, ((kx["B0"], 1.0),)))
    spec = NetworkSpec(queues, tuple(classes), class_queue, arrivals, (1.0,) * len(classes), P,
                       _rs_schedule(queues, epsilon), name="fig6")
    return spec, _rs_tags()


def collapsed_mean(epsilon: float) -> float:
    return (1 - 2 * epsilon) / epsilon**2


def build_collapsed_rs(a, epsilon) -> tuple[NetworkSpec, ComponentTags]:
    """Four single-class queues; A1 and B1 have geometric jobs of mean ``(1 - 2 eps) / eps**2``."""
    a = float(a)
    if not 0.0 < a <= 1.0:
        raise ValueError(f"arrival rate must lie in (0, 1], got {a}")
    epsilon = _check_epsilon(epsilon)
    queues = ("A0", "A1", "B0", "B1")
    p = 1.0 / collapsed_mean(epsilon)
    P = np.zeros((4, 4))
    P[0, 3] = 1.0
    P[2, 1] = 1.0
    spec = single_class_spec(queues, {"A0": a, "B0": a}, (1.0, p, 1.0, p), P,
                             _rs_schedule(queues, epsilon), name="fig8-collapsed")
    return spec, _rs_tags()


# ---- presets ------------------------------------------------------------

PRESET_DEFAULTS: dict[str, dict] = {
    "fig2": {"a": Fraction(7, 12), "nu": 6, "J": 30},
    "lqfs": {"a": Fraction(7, 12), "nu": 6, "J": 30},
    "tandem": {"a": Fraction(1, 2), "J": 5},
    "fig4-tandem": {"a": Fraction(1, 2), "J": 5},
    "branching": {"a": Fraction(1, 2)},
    "fig6": {"a": Fraction(1), "epsilon": 0.1791, "K": 20},
    "fig8-collapsed": {"a": Fraction(1), "epsilon": 0.1791},
}


@dataclass
class Built:
    spec: NetworkSpec
    tags: ComponentTags | None = None
    policy: PolicyConfig | None = None
    params: dict | None = None


def build_preset(name: str, **overrides) -> Built:
    """Build a named network; unspecified parameters take the preset defaults."""
    if name not in PRESET_DEFAULTS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESET_DEFAULTS)}")
    params = dict(PRESET_DEFAULTS[name])
    params.update({k: v for k, v in overrides.items() if v is not None and k in params})
    if name == "fig2":
        spec, tags = build_instability_network(params["a"], params["nu"], params["J"])
        return Built(spec, tags, None, params)
    if name == "lqfs":
        spec, tags, pol = build_lqfs_network(params["a"], params["nu"], params["J"])
        return Built(spec, tags, pol, params)
    if name in ("tandem", "fig4-tandem"):
        return Built(build_tandem(params["J"], params["a"]), None, None, params)
    if name == "branching":
        return Built(build_pure_branching(BRANCHING_TREE, params["a"]), None, None, params)
    if name == "fig6":
        spec, tags = build_multiclass_rs(params["a"], params["epsilon"], params["K"])
        return Built(spec, tags, None, params)
    spec, tags = build_collapsed_rs(params["a"], params["epsilon"])
    return Built(spec, tags, None, params)
