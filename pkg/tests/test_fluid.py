import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from switchnet.analysis import traffic_solve
from switchnet.builders import BRANCHING_TREE, build_instability_network, build_pure_branching, build_tandem
from switchnet.fluid import (
    FluidError,
    certificate_plan,
    decay_rate_certificate,
    fluid_run,
    fluid_step,
    initial_fluid_state,
    lyapunov_eval,
)
from switchnet.network import ConstraintRow, ScheduleSet, single_class_spec
from switchnet.policy import inverse_weights


def single_queue():
    sset = ScheduleSet.from_rows([ConstraintRow((1.0,), 1.0)])
    return single_class_spec(["Q"], {}, 1.0, np.zeros((1, 1)), sset)


def small_two_component():
    spec, _ = build_instability_network(0.5, 2, 3)
    return spec


def auto_weights(spec):
    return inverse_weights(traffic_solve(spec).rho_queue)


def lp_support(spec, v):
    """max <v, x> over the resource rows, solved as a linear program."""
    A = np.array([r.normalized() for r in spec.schedule_set.rows])
    res = linprog(-np.asarray(v), A_ub=A, b_ub=np.ones(len(A)), bounds=[(0, None)] * len(v), method="highs")
    return -res.fun


def test_single_queue_linear_drain():
    dt = 1e-3
    r = fluid_run(single_queue(), None, [1.0], dt=dt, t_max=2.0)
    assert np.all(np.abs(r.Q[:, 0] - np.maximum(0.0, 1.0 - r.t)) <= dt + 1e-12)


def test_two_queue_tandem_shared_server_empties_at_two():
    # every unit of fluid needs one unit of work at each queue from a single server
    dt = 1e-3
    sset = ScheduleSet.from_rows([ConstraintRow((1.0, 1.0), 1.0)])
    spec = single_class_spec(["Q1", "Q2"], {}, 1.0, np.array([[0.0, 1.0], [0.0, 0.0]]), sset)
    r = fluid_run(spec, None, [1.0, 0.0], dt=dt, t_max=5.0)
    # inclusive bound: the empty threshold trips exactly two steps early, up to rounding in t
    assert r.emptied_at == pytest.approx(2.0, abs=2 * dt + 1e-9)
    assert r.Q[len(r.t) // 2, 1] > 0


def test_two_queue_tandem_separate_servers_empties_at_one():
    dt = 1e-3
    r = fluid_run(build_tandem(2, 0.0), None, [1.0, 0.0], dt=dt, t_max=5.0)
    assert r.emptied_at == pytest.approx(1.0, abs=2 * dt)
    assert np.isnan(r.h).all() and r.g[0] == 1.0


def test_zero_start_is_empty():
    spec = build_tandem(3, 0.5)
    r = fluid_run(spec, None, [0.0, 0.0, 0.0])
    assert r.emptied_at == 0.0
    assert r.h.tolist() == [0.0] and r.f.tolist() == [0.0] and r.g.tolist() == [0.0]


def test_initial_mass_must_not_exceed_one():
    with pytest.raises(FluidError):
        fluid_run(build_tandem(2, 0.5), None, [0.8, 0.8])


def test_tandem_h_strictly_decreasing():
    spec = build_tandem(5, 0.5)
    r = fluid_run(spec, auto_weights(spec), np.full(5, 0.2))
    alive = r.Q.sum(axis=1) >= r.empty_threshold
    assert np.all(np.diff(r.h[alive]) < 0)


def test_tandem_empties_before_horizon():
    spec = build_tandem(5, 0.5)
    plan = certificate_plan(spec)
    r = fluid_run(spec, auto_weights(spec), np.full(5, 0.2))
    assert plan.epsilon == pytest.approx(0.5)
    assert plan.bound == pytest.approx(0.5**2 / (2 * 0.5 * 25))
    assert r.emptied_at is not None and r.emptied_at < plan.horizon(r.h[0])


def test_weighted_two_component_empties():
    spec, _ = build_instability_network(7 / 12, 6, 30)
    r = fluid_run(spec, auto_weights(spec), np.full(spec.n_queues, 1 / spec.n_queues), t_max=50)
    assert r.emptied_at is not None


def test_zero_state_readings():
    spec = small_two_component()
    lam = traffic_solve(spec).lam
    s = initial_fluid_state(spec, np.zeros(spec.n_queues))
    assert [lyapunov_eval(s, spec, lam, w) for w in ("h", "f", "g")] == [0.0, 0.0, 0.0]


def test_balanced_flow_gives_zero_f_minus_g():
    spec = build_tandem(4, 0.5)
    lam = traffic_solve(spec).lam
    s = initial_fluid_state(spec, [0.1, 0.2, 0.3, 0.4])
    s.argmax_rate = np.full(4, 0.5)
    assert lyapunov_eval(s, spec, lam, "f") - lyapunov_eval(s, spec, lam, "g") == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize(
    "builder",
    [lambda: build_tandem(5, 0.5), small_two_component, lambda: build_pure_branching(BRANCHING_TREE, 0.5)],
    ids=["tandem", "two-component", "branching"],
)
def test_h_equals_f_minus_g_on_random_states(builder):
    spec = builder()
    tr = traffic_solve(spec)
    w = auto_weights(spec)
    rng = np.random.default_rng(7)
    for _ in range(340):
        Q = rng.random(spec.n_queues) * (rng.random(spec.n_queues) < 0.8)
        # one tiny step from Q attaches the weighted argmax rate to the new state
        s = fluid_step(initial_fluid_state(spec, Q), spec, w, 1e-9)
        h = lyapunov_eval(s, spec, tr.lam, "h")
        f = lyapunov_eval(s, spec, tr.lam, "f")
        g = lyapunov_eval(s, spec, tr.lam, "g")
        assert abs(h - (f - g)) <= 1e-9
        assert h == pytest.approx(lp_support(spec, s.Q / tr.rho_queue) - s.Q.sum(), abs=1e-9)


def test_mass_balance():
    spec = build_pure_branching(BRANCHING_TREE, 0.5)
    r = fluid_run(spec, None, np.full(12, 1 / 12), t_max=3.0)
    s = r.final
    expected = 1.0 + s.t * spec.arrival_rate.sum() - float(s.D @ spec.exit_prob)
    assert abs(s.Q.sum() - expected) <= 1e-6 * max(1.0, s.t)


def test_mass_balance_stepwise():
    spec = small_two_component()
    s = initial_fluid_state(spec, np.full(8, 1 / 8))
    exit_p = spec.exit_prob
    w = auto_weights(spec)
    for _ in range(3000):
        s = fluid_step(s, spec, w, 1e-3)
        expected = 1.0 + s.t * spec.arrival_rate.sum() - float(s.D @ exit_p)
        assert abs(s.Q.sum() - expected) <= 1e-6 * max(1.0, s.t)


def test_euler_error_is_order_dt():
    spec = small_two_component()
    T, dts = 0.6, (4e-3, 2e-3, 1e-3, 5e-4)
    runs = [fluid_run(spec, None, np.full(8, 1 / 8), dt=dt, t_max=T) for dt in dts]
    coarse = int(round(T / dts[0]))

    def at(r, k):
        return r.Q[min(k * int(round(dts[0] / r.dt)), len(r.t) - 1)]

    # rates are piecewise constant, so the error lives at switching times: compare whole paths
    diffs = [max(np.abs(at(runs[i], k) - at(runs[i + 1], k)).sum() for k in range(coarse + 1))
             for i in range(len(runs) - 1)]
    # water-filling resolves the sliding motion, so the paths agree far inside the O(dt) bound
    assert all(d <= 0.05 * dt for d, dt in zip(diffs, dts)), diffs


def test_near_ties_share_the_row():
    spec, _ = build_instability_network(7 / 12, 6, 30)
    r = fluid_run(spec, auto_weights(spec), np.full(spec.n_queues, 1 / spec.n_queues), t_max=0.5)
    spread = [spec.queue_index(f"A{i}") for i in range(1, 31)]
    assert np.ptp(r.Q[-1, spread]) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=5, max_size=5))
def test_constant_load_weights_match_unweighted(Q):
    spec = build_tandem(5, 0.4)
    Q = np.asarray(Q) / max(1.0, sum(Q))
    plain = fluid_step(initial_fluid_state(spec, Q), spec, None, 1e-3)
    weighted = fluid_step(initial_fluid_state(spec, Q), spec, auto_weights(spec), 1e-3)
    assert np.array_equal(plain.argmax_rate, weighted.argmax_rate)
    assert np.array_equal(plain.Q, weighted.Q)


@pytest.mark.parametrize(
    "builder",
    [lambda: build_tandem(5, 0.5), small_two_component, lambda: build_pure_branching(BRANCHING_TREE, 0.5)],
    ids=["tandem", "two-component", "branching"],
)
def test_h_nonnegative_on_stable_runs(builder):
    spec = builder()
    r = fluid_run(spec, auto_weights(spec), np.full(spec.n_queues, 1 / spec.n_queues), t_max=30)
    assert r.h.min() >= -1e-9


def test_tandem_certificate():
    spec = build_tandem(5, 0.5)
    plan = certificate_plan(spec)
    r = fluid_run(spec, auto_weights(spec), np.full(5, 0.2))
    assert decay_rate_certificate(r, plan.bound, "h").passed


def test_branching_certificate():
    spec = build_pure_branching(BRANCHING_TREE, 0.5)
    plan = certificate_plan(spec)
    assert plan.which == "g_branch"
    r = fluid_run(spec, None, np.full(12, 1 / 12))
    assert decay_rate_certificate(r, plan.bound, "g_branch").passed


def test_unweighted_two_component_fails_certificate():
    spec, _ = build_instability_network(7 / 12, 6, 30)
    plan = certificate_plan(spec)
    r = fluid_run(spec, None, np.full(spec.n_queues, 1 / spec.n_queues), t_max=20)
    rep = decay_rate_certificate(r, plan.bound, "h")
    assert not rep.passed
    assert rep.worst_slope > 0


def test_unknown_function_rejected():
    spec = build_tandem(2, 0.5)
    with pytest.raises(FluidError):
        lyapunov_eval(initial_fluid_state(spec, [0.1, 0.1]), spec, [0.5, 0.5], "q")
