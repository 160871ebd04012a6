"""End-to-end acceptance checks, one test per criterion, each at its pinned tolerance."""

import time
from fractions import Fraction

import numpy as np
import pytest

from oracles import brute_force_max, random_constraint_set
from switchnet import cli
from switchnet.analysis import (
    THM1,
    THM6,
    concentration_test,
    detect_cycles,
    predicted_V_coefficient,
    stability_proxy,
    theorem_condition_check,
    traffic_solve,
)
from switchnet.builders import (
    BRANCHING_TREE,
    PRESET_DEFAULTS,
    build_collapsed_rs,
    build_instability_network,
    build_lqfs_network,
    build_multiclass_rs,
    build_preset,
    build_pure_branching,
    build_tandem,
)
from switchnet.fluid import certificate_plan, decay_rate_certificate, fluid_run, fluid_step, initial_fluid_state, lyapunov_eval
from switchnet.policy import (
    LARGEST_CLASS,
    MAX_WEIGHT,
    WEIGHTED_MAX_WEIGHT,
    PolicyConfig,
    inverse_weights,
    max_weight_schedule,
    objective,
)
from switchnet.sim import Simulator, initial_state, run

pytestmark = pytest.mark.slow

A, NU, J = Fraction(7, 12), 6, 30
SEEDS = (1, 2, 3, 4, 5)
INIT = {"A0": 1722}
STEPS = 500_000
EVERY = 10


@pytest.fixture(scope="module")
def two_component():
    return build_instability_network(A, NU, J)


@pytest.fixture(scope="module")
def maxweight_runs(two_component):
    spec, tags = two_component
    out = {}
    for seed in SEEDS:
        traj = run(spec, PolicyConfig(MAX_WEIGHT), INIT, STEPS, EVERY, seed=seed)
        out[seed] = (int(traj.total[-1]), detect_cycles(traj, tags, NU, a=float(A)))
    return out


def test_criterion_1_condition_window(acceptance_report, capsys):
    t0 = time.perf_counter()
    rep = theorem_condition_check(THM1, Fraction(7, 12), 6, 30)
    code = cli.main(["check", "--preset", "fig2", "--a", "7/12", "--nu", "6", "--J", "30"])
    elapsed = time.perf_counter() - t0
    out = capsys.readouterr().out
    ok = (
        rep.all_pass
        and rep.a_lower == Fraction(30, 54)
        and rep.r_rho == Fraction(49, 72)
        and rep.gamma_max == Fraction(35, 32)
        and code == 0
        and "30/54" in out
        and elapsed < 1.0
    )
    acceptance_report(1, ok, f"lower={rep.a_lower} (30/54), r_rho={rep.r_rho}, gamma_max={rep.gamma_max}, "
                             f"{elapsed:.3f}s")
    assert ok


def test_criterion_2_instability(maxweight_runs, acceptance_report):
    rows, ok = [], True
    grew = 0
    for seed, (final, cycles) in maxweight_runs.items():
        gm = cycles.geometric_mean_growth()
        ok &= len(cycles) >= 5 and 1.0 < gm < 1.15
        grew += final >= 3 * sum(INIT.values())
        rows.append(f"seed {seed}: {len(cycles)} cycles, growth {gm:.4f}, final {final}")
    ok &= grew >= 4
    acceptance_report(2, ok, f"{grew}/5 seeds tripled; " + "; ".join(rows))
    assert ok


def test_criterion_3_cycle_timing(maxweight_runs, acceptance_report):
    coef = predicted_V_coefficient(float(A), NU, J)
    ratios = [
        (c.V - c.start) / (coef * c.M)
        for _, cycles in maxweight_runs.values()
        for c in cycles
        if c.M >= 5000
    ]
    within = sum(abs(r - 1) <= 0.15 for r in ratios)
    ok = bool(ratios) and within >= 0.8 * len(ratios)
    spread = f"ratio range [{min(ratios):.3f}, {max(ratios):.3f}]" if ratios else "no cycles with M >= 5000"
    acceptance_report(3, ok, f"coefficient {coef}; {within}/{len(ratios)} cycles within 15%; {spread}")
    assert ok


def test_criterion_4_weighted_stabilizes(two_component, acceptance_report):
    spec, _ = two_component
    cfg = PolicyConfig(WEIGHTED_MAX_WEIGHT, weights=inverse_weights(traffic_solve(spec).rho_queue))
    rows, ok = [], True
    for seed in SEEDS:
        rep = stability_proxy(run(spec, cfg, INIT, STEPS, EVERY, seed=seed))
        ok &= rep.slope_nonpositive(2.0) and rep.empty_fraction > 0
        rows.append(f"seed {seed}: slope {rep.drift_slope:.2e} (se {rep.slope_se:.1e}), "
                    f"empty {rep.empty_fraction:.4f}, mean {rep.time_avg_total:.0f}")
    acceptance_report(4, ok, "; ".join(rows))
    assert ok


def test_criterion_5_tandem_stable(acceptance_report):
    spec = build_tandem(5, 0.5)
    rep = stability_proxy(run(spec, PolicyConfig(MAX_WEIGHT), None, 1_000_000, EVERY, seed=1))
    ok = rep.empty_fraction > 0.01 and abs(rep.drift_slope) <= 3 * rep.slope_se
    acceptance_report(5, ok, f"empty {rep.empty_fraction:.4f}, slope {rep.drift_slope:.2e} (se {rep.slope_se:.1e})")
    assert ok


def test_criterion_6_fluid_certificates(acceptance_report):
    parts = {}
    t0 = time.perf_counter()

    spec = build_tandem(5, 0.5)
    plan = certificate_plan(spec)
    r = fluid_run(spec, inverse_weights(traffic_solve(spec).rho_queue), np.full(5, 0.2))
    alive = r.Q.sum(axis=1) >= r.empty_threshold
    cert = decay_rate_certificate(r, plan.bound, "h")
    horizon = plan.horizon(r.h[0])
    parts["a"] = (cert.passed and bool(np.all(np.diff(r.h[alive]) <= 0))
                  and r.emptied_at is not None and r.emptied_at < horizon,
                  f"tandem empties at {r.emptied_at:.3f} < t0 {horizon:.1f}")

    spec = build_pure_branching(BRANCHING_TREE, 0.5)
    plan = certificate_plan(spec)
    cert = decay_rate_certificate(fluid_run(spec, None, np.full(12, 1 / 12)), plan.bound, "g_branch")
    parts["b"] = (cert.passed and plan.bound == pytest.approx(plan.epsilon**2 / 2),
                  f"branching g slope {cert.worst_slope:.3g} <= -{plan.bound:.3g}")

    spec, _ = build_instability_network(A, NU, J)
    plan = certificate_plan(spec, c=0.5)
    q0 = np.full(spec.n_queues, 1 / spec.n_queues)
    weighted = fluid_run(spec, inverse_weights(traffic_solve(spec).rho_queue), q0, t_max=50)
    cert = decay_rate_certificate(weighted, plan.bound, "h")
    parts["c"] = (cert.passed, f"weighted h slope {cert.worst_slope:.3g} <= -{plan.bound:.3g} (tol {cert.tolerance:.3g})")

    cert = decay_rate_certificate(fluid_run(spec, None, q0, t_max=20), plan.bound, "h")
    parts["d"] = (not cert.passed, f"unweighted h slope {cert.worst_slope:.3g} (expected failure)")

    elapsed = time.perf_counter() - t0
    ok = all(p for p, _ in parts.values())
    acceptance_report(6, ok, "; ".join(f"({k}) {'ok' if p else 'FAIL'} {d}" for k, (p, d) in parts.items())
                      + f"; {elapsed:.1f}s")
    assert ok


def test_criterion_7_multiclass(acceptance_report):
    rows, ok = [], True
    fifo = PolicyConfig(MAX_WEIGHT)
    multi, _ = build_multiclass_rs(1.0, 0.1791, 20)
    collapsed, _ = build_collapsed_rs(1.0, 0.1791)
    for name, spec in (("multiclass", multi), ("collapsed", collapsed)):
        rep = stability_proxy(run(spec, fifo, {"A0": 55}, 200_000, EVERY, seed=1))
        ok &= rep.drift_slope > 0 and rep.p_positive < 0.01
        rows.append(f"{name} FIFO slope {rep.drift_slope:.3f} p={rep.p_positive:.1e}")
    cfg = PolicyConfig(LARGEST_CLASS, class_weights=inverse_weights(traffic_solve(multi).rho_class))
    rep = stability_proxy(run(multi, cfg, {"A0": 55}, 200_000, EVERY, seed=1))
    ok &= rep.slope_nonpositive(2.0) and rep.empty_fraction > 0
    rows.append(f"largest-class slope {rep.drift_slope:.2e} (se {rep.slope_se:.1e}), empty {rep.empty_fraction:.4f}")
    acceptance_report(7, ok, "; ".join(rows))
    assert ok


def test_criterion_8_lqfs(acceptance_report):
    rep = theorem_condition_check(THM6, A, NU, J)
    spec, tags, policy = build_lqfs_network(A, NU, J)
    rows, grew, ok = [], 0, rep.all_pass and rep.a_lower == Fraction(30, 59)
    for seed in SEEDS:
        traj = run(spec, policy, INIT, 200_000, EVERY, seed=seed)
        cycles = detect_cycles(traj, tags, NU, a=float(A), primed=True)
        gm = cycles.geometric_mean_growth()
        ok &= len(cycles) > 0 and cycles.threshold_multiplier == 1.0
        grew += len(cycles) > 0 and gm > 1
        rows.append(f"seed {seed}: {len(cycles)} cycles, growth {gm:.3f}")
    ok &= grew >= 4
    acceptance_report(8, ok, f"lower={rep.a_lower}, all conditions {rep.all_pass}; {grew}/5 growing; " + "; ".join(rows))
    assert ok


def test_criterion_9_oracle_equivalence(acceptance_report):
    rng = np.random.default_rng(2024)
    mismatches, n = 0, 0
    for _ in range(20):
        sset = random_constraint_set(rng)
        for _ in range(50):
            Q = rng.integers(0, 40, size=sset.dim).tolist()
            n += 1
            mismatches += objective(max_weight_schedule(Q, sset).sigma, Q) != brute_force_max(Q, sset)
    ok = mismatches == 0 and n == 1000
    acceptance_report(9, ok, f"{n - mismatches}/{n} objectives equal over 20 random sets")
    assert ok


def test_criterion_10_invariants(acceptance_report):
    # flow conservation on debug runs; the engine raises on any nonzero residual
    debug_cases = [
        (build_instability_network(A, NU, J)[0], PolicyConfig(MAX_WEIGHT), {"A0": 500}),
        (build_multiclass_rs(1.0, 0.1791, 20)[0], PolicyConfig(MAX_WEIGHT), {"A0": 55}),
        (build_collapsed_rs(1.0, 0.1791)[0], PolicyConfig(MAX_WEIGHT), {"A0": 55}),
        (build_lqfs_network(A, NU, J)[0], build_lqfs_network(A, NU, J)[2], {"A0": 500}),
        (build_tandem(5, 0.5), PolicyConfig(MAX_WEIGHT), None),
    ]
    worst = 0
    for spec, cfg, init in debug_cases:
        sim = Simulator(spec, cfg, debug=True)
        st = initial_state(spec, init, seed=1)
        for _ in range(5000):
            sim.step(st)
        res = np.asarray(st.initial_class_len) + st.A - np.asarray(st.D) - st.class_len
        worst = max(worst, int(np.abs(res).max()))

    traffic_res = max(traffic_solve(build_preset(name).spec).residual for name in PRESET_DEFAULTS)

    identity = 0.0
    rng = np.random.default_rng(10)
    fluid_specs = [build_tandem(5, 0.5), build_instability_network(A, NU, J)[0],
                   build_pure_branching(BRANCHING_TREE, 0.5)]
    for i in range(1000):
        spec = fluid_specs[i % 3]
        tr = traffic_solve(spec)
        Q = rng.random(spec.n_queues)
        s = fluid_step(initial_fluid_state(spec, Q), spec, inverse_weights(tr.rho_queue), 1e-9)
        h, f, g = (lyapunov_eval(s, spec, tr.lam, w) for w in ("h", "f", "g"))
        identity = max(identity, abs(h - (f - g)))

    conc_spec = build_tandem(1, 0.02)
    rates = [concentration_test(conc_spec, T, 0.01, 200, seed=3) for T in (1_000, 10_000, 100_000)]
    monotone = rates[0] <= rates[1] <= rates[2]

    ok = worst == 0 and traffic_res <= 1e-10 and identity <= 1e-9 and monotone
    acceptance_report(10, ok, f"conservation residual {worst}; traffic residual {traffic_res:.1e}; "
                              f"h-(f-g) max {identity:.1e}; concentration pass rates {rates}")
    assert ok
