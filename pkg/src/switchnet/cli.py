"""Command-line experiment driver.

Subcommands: ``build``, ``check``, ``simulate``, ``fluid`` and ``sweep``.
Every run can be described by a JSON experiment config (``--config``);
command-line flags override config values.  Exit status is 0 on success,
2 when the input does not validate and 3 when a run fails.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import analysis, builders, fluid, sim
from .network import NetworkSpec, SpecError, validate_spec
from .policy import AUTO_RHO, LQFS_BATCH, MAX_WEIGHT, PolicyConfig, inverse_weights

SCHEMA_VERSION = 1
EXIT_OK = 0
EXIT_INVALID = 2
EXIT_RUNTIME = 3


class ConfigError(ValueError):
    """The experiment description is incomplete or inconsistent."""


def parse_number(text: Any):
    """Parse ``7/12``, ``0.5`` or ``6`` exactly; integers stay integers."""
    if isinstance(text, (int, Fraction)):
        return text
    if isinstance(text, float):
        return Fraction(text).limit_denominator(10**12)
    s = str(text).strip()
    try:
        f = Fraction(s)
    except ValueError as exc:
        raise ConfigError(f"not a number: {text!r}") from exc
    return int(f) if f.denominator == 1 and "." not in s else f


def _jsonable(x):
    if isinstance(x, Fraction):
        return str(x) if x.denominator != 1 else int(x)
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def _dump(path: Path, doc: Mapping) -> None:
    body = dict(doc)
    body.setdefault("schema_version", SCHEMA_VERSION)
    path.write_text(json.dumps(_jsonable(body), indent=2, sort_keys=True) + "\n")


# ---- experiment config ---------------------------------------------------

@dataclass
class ExperimentConfig:
    mode: str = "simulate"
    preset: str | None = None
    params: dict = field(default_factory=dict)
    spec_path: str | None = None
    policy: dict = field(default_factory=dict)
    initial: dict = field(default_factory=dict)
    steps: int = 10_000
    record_every: int = 1
    seed: int | None = None
    out: str | None = None
    dt: float = fluid.DEFAULT_DT
    t_max: float = 100.0
    q0: list | None = None
    grid: dict = field(default_factory=dict)
    workers: int = 1
    kind: str | None = None

    @classmethod
    def from_json(cls, doc: Mapping) -> "ExperimentConfig":
        cfg = cls()
        net = doc.get("network", {})
        cfg.preset = net.get("preset")
        cfg.params = {k: parse_number(v) for k, v in net.get("params", {}).items()}
        cfg.spec_path = net.get("spec")
        for key in ("mode", "policy", "initial", "steps", "record_every", "seed", "dt", "t_max",
                    "q0", "grid", "workers", "kind"):
            if key in doc:
                setattr(cfg, key, doc[key])
        cfg.out = doc.get("outputs", {}).get("dir", cfg.out)
        return cfg

    def to_json(self) -> dict:
        net: dict = {}
        if self.preset:
            net["preset"] = self.preset
            net["params"] = self.params
        if self.spec_path:
            net["spec"] = self.spec_path
        return _jsonable({
            "schema_version": SCHEMA_VERSION,
            "mode": self.mode,
            "network": net,
            "policy": self.policy,
            "initial": self.initial,
            "steps": self.steps,
            "record_every": self.record_every,
            "seed": self.seed,
            "outputs": {"dir": self.out},
        })


@dataclass
class Network:
    spec: NetworkSpec
    tags: builders.ComponentTags | None
    default_policy: PolicyConfig | None
    params: dict


def load_network(cfg: ExperimentConfig) -> Network:
    if cfg.spec_path:
        doc = json.loads(Path(cfg.spec_path).read_text())
        spec = NetworkSpec.from_json(doc)
        tags = builders.ComponentTags.from_json(doc["tags"]) if "tags" in doc else None
        net = Network(spec, tags, None, {})
    elif cfg.preset:
        try:
            built = builders.build_preset(cfg.preset, **cfg.params)
        except KeyError as exc:
            raise ConfigError(str(exc)) from exc
        net = Network(built.spec, built.tags, built.policy, built.params)
    else:
        raise ConfigError("no network given: use --preset or a config with network.preset / network.spec")
    problems = validate_spec(net.spec)
    if problems:
        raise SpecError("invalid network:\n  " + "\n  ".join(problems))
    return net


def resolve_policy(cfg: ExperimentConfig, net: Network) -> PolicyConfig:
    doc = dict(cfg.policy)
    if not doc.get("kind") and net.default_policy is not None and doc.get("weights") is None:
        return net.default_policy
    doc.setdefault("kind", MAX_WEIGHT)
    if doc.get("seed") is None and cfg.seed is not None:
        doc["seed"] = cfg.seed
    return PolicyConfig.from_json(doc, net.spec)


def pattern_initial(net: Network, M: int, eps: float = 0.0, multiplier: int | None = None) -> dict[str, int]:
    """Loaded, balanced component B holding ``M`` jobs; ``eps * M / nu`` jobs spread over A.

    B's hub holds ``multiplier`` times each spread queue (``nu`` for plain
    MaxWeight, 1 for the batch longest-queue weighting), up to rounding.
    """
    if net.tags is None:
        raise ConfigError("the loaded-component pattern needs a two-component network")
    nu = int(net.params.get("nu", 1))
    mult = nu if multiplier is None else multiplier
    comps = net.tags.components()
    A, B = comps[0], comps[1]
    spread_b = net.tags.spread(B)
    J = len(spread_b)
    each = M // (J + mult)
    init = {q: each for q in spread_b}
    init[net.tags.hub(B)] = M - J * each
    extra = int(eps * M / nu)
    members_a = net.tags.members(A)
    base, rem = divmod(extra, len(members_a))
    for i, q in enumerate(members_a):
        n = base + (1 if i < rem else 0)
        if n:
            init[q] = n
    return init


def resolve_initial(cfg: ExperimentConfig, net: Network, policy: PolicyConfig) -> dict[str, int] | None:
    init = cfg.initial or {}
    if "pattern" in init:
        pat = init["pattern"]
        mult = pat.get("multiplier")
        if mult is None and policy.kind == LQFS_BATCH:
            mult = 1
        return pattern_initial(net, int(pat["M"]), float(pat.get("eps", 0.0)), mult)
    counts = init.get("counts", {k: v for k, v in init.items() if k != "pattern"})
    for key in counts:
        if key not in net.spec.queues and key not in net.spec.classes:
            raise ConfigError(f"initial condition names unknown queue {key!r}")
    return {k: int(v) for k, v in counts.items()}


# ---- outputs -------------------------------------------------------------

def gnuplot_script(csv_name: str, columns: Sequence[str], title: str, xlabel: str = "t") -> str:
    lines = [
        "set datafile separator ','",
        "set key outside right",
        f"set title '{title}'",
        f"set xlabel '{xlabel}'",
        "set ylabel 'jobs'",
        f"plot " + ", \\\n     ".join(
            f"'{csv_name}' using 1:'{c}' with lines title '{c}'" for c in columns
        ),
    ]
    return "\n".join(lines) + "\n"


def _out_dir(cfg: ExperimentConfig) -> Path | None:
    if not cfg.out:
        return None
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---- modes ---------------------------------------------------------------

def do_build(cfg: ExperimentConfig) -> int:
    net = load_network(cfg)
    doc = net.spec.to_json()
    if net.tags is not None:
        doc["tags"] = net.tags.to_json()
    if net.default_policy is not None:
        doc["policy"] = net.default_policy.to_json()
    out = _out_dir(cfg)
    if out is None:
        print(json.dumps(_jsonable(doc), indent=2))
    else:
        path = out / f"{net.spec.name or 'network'}.json"
        _dump(path, doc)
        print(f"wrote {path}")
    return EXIT_OK


def do_check(cfg: ExperimentConfig) -> int:
    kind = cfg.kind or (analysis.THM6 if cfg.preset == "lqfs" else analysis.THM1)
    defaults = builders.PRESET_DEFAULTS["fig2"]
    a = cfg.params.get("a", defaults["a"])
    nu = cfg.params.get("nu", defaults["nu"])
    J = cfg.params.get("J", defaults["J"])
    report = analysis.theorem_condition_check(kind, a, nu, J)
    lower_raw = f"{J}/{2 * J - nu}" if kind == analysis.THM1 else f"{J}/{2 * J - 1}"
    print(report.table())
    print(f"  lower bound    : {lower_raw}")
    doc = report.to_json()
    doc["a_lower_unreduced"] = lower_raw
    out = _out_dir(cfg)
    if out is not None:
        _dump(out / "check.json", doc)
    return EXIT_OK


def simulate_once(cfg: ExperimentConfig, write: bool = True) -> dict:
    net = load_network(cfg)
    policy = resolve_policy(cfg, net)
    init = resolve_initial(cfg, net, policy)
    if cfg.seed is None:
        raise ConfigError("simulate needs a seed (--seed or \"seed\" in the config)")
    if int(cfg.steps) < 1:
        raise ConfigError("steps must be at least 1")
    traj = sim.run(net.spec, policy, init, int(cfg.steps), int(cfg.record_every), seed=int(cfg.seed))
    summary = traj.summary(int(cfg.steps))
    summary["network"] = net.spec.name
    summary["policy"] = policy.to_json()
    if len(traj.times) >= 10_000:
        summary["stability"] = analysis.stability_proxy(traj).to_json()
    cycles = None
    if net.tags is not None and "nu" in net.params:
        a = float(net.params["a"])
        cycles = analysis.detect_cycles(traj, net.tags, int(net.params["nu"]), a=a,
                                        primed=policy.kind == LQFS_BATCH)
        summary["n_cycles"] = len(cycles)
        summary["geometric_mean_growth"] = cycles.geometric_mean_growth() if len(cycles) else None
    out = _out_dir(cfg) if write else None
    if out is not None:
        traj.write_csv(out / "trajectory.csv", include_classes=net.spec.is_multiclass)
        _dump(out / "summary.json", summary)
        if cycles is not None:
            _dump(out / "cycles.json", cycles.to_json())
        (out / "trajectory.gp").write_text(
            gnuplot_script("trajectory.csv", ["total"], f"{net.spec.name} under {policy.kind}")
        )
    return summary


def do_simulate(cfg: ExperimentConfig) -> int:
    summary = simulate_once(cfg)
    keys = ("network", "steps", "seed", "final_total", "min_total", "max_total", "n_cycles", "geometric_mean_growth")
    for k in keys:
        if k in summary:
            print(f"{k:>22}: {summary[k]}")
    return EXIT_OK


def do_fluid(cfg: ExperimentConfig) -> int:
    net = load_network(cfg)
    spec = net.spec
    traffic = analysis.traffic_solve(spec)
    w_doc = cfg.policy.get("weights")
    if w_doc == AUTO_RHO:
        weights = inverse_weights(traffic.rho_queue)
    elif w_doc in (None, "ones"):
        weights = None
    else:
        weights = [float(x) for x in w_doc]
    if cfg.q0 is not None:
        q0 = np.asarray([float(parse_number(x)) for x in cfg.q0])
    else:
        q0 = np.full(spec.n_queues, 1.0 / spec.n_queues)
    run = fluid.fluid_run(spec, weights, q0, dt=float(cfg.dt), t_max=float(cfg.t_max), traffic=traffic)
    plan = fluid.certificate_plan(spec, traffic)
    cert = fluid.decay_rate_certificate(run, plan.bound, plan.which)
    start = float(run.series(plan.which)[0])
    horizon = plan.horizon(start)
    doc = cert.to_json()
    doc.update({
        "epsilon": plan.epsilon,
        "initial_value": start,
        "empty_by": horizon,
        "emptied_at": run.emptied_at,
        "emptied_in_time": run.emptied_at is not None and run.emptied_at <= horizon,
        "empty_threshold": run.empty_threshold,
        "weights": "auto_rho" if w_doc == AUTO_RHO else "ones" if weights is None else list(weights),
    })
    print(f"network {spec.name}: emptied at {run.emptied_at} (horizon {horizon:.6g})")
    print(f"certificate on {plan.which}: bound {plan.bound:.6g}, worst slope {cert.worst_slope:.6g}, "
          f"tolerance {cert.tolerance:.3g} -> {'PASS' if cert.passed else 'FAIL'}")
    out = _out_dir(cfg)
    if out is not None:
        (out / "fluid.csv").write_text(run.to_csv(spec.queues, every=max(1, int(cfg.record_every))))
        _dump(out / "certificate.json", doc)
        (out / "fluid.gp").write_text(gnuplot_script("fluid.csv", ["total", "h", "g"], f"fluid {spec.name}"))
    return EXIT_OK


def point_seed(master: int, point: Mapping) -> int:
    """Per-point seed: first 8 bytes (big-endian) of SHA-256 over ``"<master>|<sorted JSON of point>"``."""
    payload = f"{master}|{json.dumps(_jsonable(dict(point)), sort_keys=True)}".encode()
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "big")


def _sweep_point(args: tuple[dict, dict]) -> dict:
    base, point = args
    cfg = ExperimentConfig.from_json(base)
    cfg.params = {**cfg.params, **{k: parse_number(v) for k, v in point.items() if k not in ("seed",)}}
    if "seed" in point:
        cfg.seed = int(point["seed"])
    cfg.seed = point_seed(int(cfg.seed or 0), point)
    cfg.out = None
    try:
        summary = simulate_once(cfg, write=False)
        summary.pop("wall_time_s", None)
        return {"point": point, "seed": cfg.seed, "ok": True, "summary": summary}
    except Exception as exc:  # one bad point must not sink the sweep
        return {"point": point, "seed": cfg.seed, "ok": False, "error": f"{type(exc).__name__}: {exc}"}


def sweep(cfg: ExperimentConfig, grid: Mapping[str, Sequence], workers: int = 1) -> dict:
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("sweep grid must be nonempty")
    keys = sorted(grid)
    points = [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]
    base = cfg.to_json()
    base["network"]["params"] = _jsonable(cfg.params)
    base["seed"] = cfg.seed or 0
    jobs = [(base, _jsonable(p)) for p in points]
    if workers <= 1:
        results = [_sweep_point(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_point, jobs))
    return {"schema_version": SCHEMA_VERSION, "master_seed": cfg.seed or 0, "points": results}


def parse_grid(items: Sequence[str]) -> dict[str, list]:
    grid: dict[str, list] = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"grid entry {item!r} is not name=v1,v2,...")
        name, values = item.split("=", 1)
        grid[name.strip()] = [parse_number(v) for v in values.split(",") if v.strip()]
    return grid


def do_sweep(cfg: ExperimentConfig) -> int:
    grid = {k: [parse_number(v) for v in vs] for k, vs in cfg.grid.items()}
    result = sweep(cfg, grid, int(cfg.workers))
    out = _out_dir(cfg)
    if out is not None:
        _dump(out / "sweep.json", result)
    for r in result["points"]:
        s = r.get("summary", {})
        status = "ok" if r["ok"] else r["error"]
        print(f"{json.dumps(_jsonable(r['point']), sort_keys=True)}: final_total={s.get('final_total')} "
              f"growth={s.get('geometric_mean_growth')} [{status}]")
    return EXIT_OK


MODES = {"build": do_build, "check": do_check, "simulate": do_simulate, "fluid": do_fluid, "sweep": do_sweep}


# ---- argument parsing ----------------------------------------------------

def _parse_init(items: Sequence[str]) -> dict[str, int]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--init expects QUEUE=COUNT, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = int(v)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="switchnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--preset", choices=sorted(builders.PRESET_DEFAULTS))
    common.add_argument("--spec", help="network spec JSON (instead of a preset)")
    common.add_argument("--a", type=parse_number, help="arrival rate; fractions like 7/12 are exact")
    common.add_argument("--nu", type=int)
    common.add_argument("--J", type=int)
    common.add_argument("--epsilon", type=parse_number)
    common.add_argument("--K", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--record-every", type=int)

    sub.add_parser("build", parents=[common], help="write a network spec as JSON")
    chk = sub.add_parser("check", parents=[common], help="evaluate the transience parameter window")
    chk.add_argument("--kind", choices=[analysis.THM1, analysis.THM6])

    def add_run_flags(p):
        p.add_argument("--policy", dest="policy_kind", help="policy kind (default: MaxWeight or the preset's own)")
        p.add_argument("--weights", help="'auto_rho' for 1/rho weights")
        p.add_argument("--tie-break", choices=["Lexicographic", "SeededRandom"])

    simp = sub.add_parser("simulate", parents=[common], help="run the stochastic network")
    add_run_flags(simp)
    simp.add_argument("--steps", type=int)
    simp.add_argument("--init", action="append", default=[], metavar="QUEUE=COUNT")
    simp.add_argument("--pattern-M", type=int, help="start from the loaded-component pattern with M jobs")
    simp.add_argument("--pattern-eps", type=float, default=0.0)

    fl = sub.add_parser("fluid", parents=[common], help="integrate the fluid model and certify decay")
    add_run_flags(fl)
    fl.add_argument("--dt", type=float)
    fl.add_argument("--t-max", type=float)
    fl.add_argument("--q0", help="comma-separated initial fluid levels (default: uniform, total 1)")

    sw = sub.add_parser("sweep", parents=[common], help="simulate over a parameter grid")
    add_run_flags(sw)
    sw.add_argument("--steps", type=int)
    sw.add_argument("--init", action="append", default=[], metavar="QUEUE=COUNT")
    sw.add_argument("--grid", action="append", default=[], metavar="NAME=V1,V2,...")
    sw.add_argument("--workers", type=int)
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    if args.config:
        try:
            cfg = ExperimentConfig.from_json(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    else:
        cfg = ExperimentConfig()
    cfg.mode = args.command
    if args.preset:
        cfg.preset = args.preset
    if args.spec:
        cfg.spec_path = args.spec
    for name in ("a", "nu", "J", "epsilon", "K"):
        v = getattr(args, name, None)
        if v is not None:
            cfg.params[name] = v
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.out = args.out
    if args.record_every:
        cfg.record_every = args.record_every
    if getattr(args, "kind", None):
        cfg.kind = args.kind
    if getattr(args, "policy_kind", None):
        cfg.policy["kind"] = args.policy_kind
    if getattr(args, "weights", None):
        cfg.policy["weights"] = args.weights
    if getattr(args, "tie_break", None):
        cfg.policy["tie_break"] = args.tie_break
    if getattr(args, "steps", None):
        cfg.steps = args.steps
    if getattr(args, "init", None):
        cfg.initial = {"counts": _parse_init(args.init)}
    if getattr(args, "pattern_M", None):
        cfg.initial = {"pattern": {"M": args.pattern_M, "eps": args.pattern_eps}}
    if getattr(args, "dt", None):
        cfg.dt = args.dt
    if getattr(args, "t_max", None):
        cfg.t_max = args.t_max
    if getattr(args, "q0", None):
        cfg.q0 = [x for x in args.q0.split(",")]
    if getattr(args, "grid", None):
        cfg.grid = parse_grid(args.grid)
    if getattr(args, "workers", None):
        cfg.workers = args.workers
    return cfg


def run_experiment(cfg: ExperimentConfig) -> int:
    """Execute ``cfg.mode`` and map failures onto exit statuses."""
    try:
        if cfg.mode not in MODES:
            raise ConfigError(f"unknown mode {cfg.mode!r}; choose from {sorted(MODES)}")
        return MODES[cfg.mode](cfg)
    except (ConfigError, SpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, KeyError) as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return run_experiment(cfg)


if __name__ == "__main__":
    sys.exit(main())
