import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_max, random_constraint_set
from switchnet.builders import build_instability_network, build_multiclass_rs, build_tandem
from switchnet.network import ConstraintRow, NetworkSpec, ScheduleSet, enumerate_maximal_schedules, scale_schedule_set
from switchnet.policy import (
    BACK_PRESSURE,
    LARGEST_CLASS,
    MAX_WEIGHT,
    PROPORTIONAL,
    SEEDED_RANDOM,
    WEIGHTED_MAX_WEIGHT,
    ArgmaxSolver,
    OverlappingSupportError,
    Policy,
    PolicyConfig,
    back_pressure_schedule,
    back_pressure_weights,
    inverse_weights,
    largest_class_schedule,
    max_weight_schedule,
    objective,
    proportional_schedule,
    proportional_target,
)


def one_queue_two_classes():
    sset = ScheduleSet.from_rows([ConstraintRow((1.0,), 1.0)])
    return NetworkSpec(("Q",), ("k1", "k2"), (0, 0), (), (1.0, 1.0), np.zeros((2, 2)), sset)


def test_dominant_queue_explicit():
    sset = ScheduleSet.explicit([(0, 0), (1, 0), (0, 1)])
    assert max_weight_schedule((3, 1), sset).sigma == (1, 0)


def test_small_two_component_serves_hub():
    spec, _ = build_instability_network(0.5, 2, 3)
    Q = [0] * spec.n_queues
    Q[spec.queue_index("A0")] = 10
    for j in (1, 2, 3):
        Q[spec.queue_index(f"A{j}")] = 2
    sigma = max_weight_schedule(Q, spec.schedule_set).sigma
    assert sigma[spec.queue_index("A0")] == 1
    assert objective(sigma, Q) == brute_force_max(Q, spec.schedule_set) == 10


@pytest.mark.parametrize("form", ["explicit", "constraints"])
def test_empty_system_gives_zero(form):
    rows = ScheduleSet.from_rows([ConstraintRow((1.0, 0.5), 1.0)])
    sset = rows if form == "constraints" else ScheduleSet.explicit(
        [(0, 0), (1, 0), (0, 1), (0, 2)])
    assert max_weight_schedule((0, 0), sset).sigma == (0, 0)


def test_greedy_packing_counterexample():
    # row 0.45*x0 + 0.3*x1 <= 1: per-unit greedy takes two x0 units (value 10), best is (1, 1) or (0, 3)
    sset = ScheduleSet.from_rows([ConstraintRow((0.45, 0.3), 1.0)])
    Q = (5, 4)
    sigma = max_weight_schedule(Q, sset).sigma
    assert objective(sigma, Q) == brute_force_max(Q, sset) == 12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_argmax_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    sset = random_constraint_set(rng)
    for _ in range(10):
        Q = rng.integers(0, 30, size=sset.dim).tolist()
        sigma = max_weight_schedule(Q, sset).sigma
        assert sset.contains(sigma)
        assert objective(sigma, Q) == brute_force_max(Q, sset)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_explicit_argmax_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    sset = random_constraint_set(rng, max_dim=4, max_points=200)
    explicit = ScheduleSet.explicit(enumerate_maximal_schedules(sset)).downward_closure()
    Q = rng.integers(0, 20, size=sset.dim).tolist()
    a = max_weight_schedule(Q, explicit).sigma
    b = max_weight_schedule(Q, sset).sigma
    assert objective(a, Q) == objective(b, Q)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.001, 0.5, 3.0, 1e6]))
def test_scale_invariance(seed, lam):
    rng = np.random.default_rng(seed)
    sset = random_constraint_set(rng)
    Q = rng.integers(0, 30, size=sset.dim).tolist()
    assert max_weight_schedule(Q, sset).sigma == max_weight_schedule([lam * q for q in Q], sset).sigma


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.25, 1.0, 7.0]))
def test_constant_weights_reduce_to_unweighted(seed, w):
    rng = np.random.default_rng(seed)
    sset = random_constraint_set(rng)
    Q = rng.integers(0, 30, size=sset.dim).tolist()
    weighted = max_weight_schedule(Q, sset, weights=[w] * sset.dim).sigma
    plain = max_weight_schedule(Q, sset).sigma
    assert objective(weighted, [w * q for q in Q]) == pytest.approx(w * objective(plain, Q), rel=1e-12)


def test_seeded_random_tie_break_varies_and_stays_optimal():
    sset = ScheduleSet.from_rows([ConstraintRow((1.0, 1.0, 1.0), 1.0)])
    rng = np.random.default_rng(3)
    seen = {max_weight_schedule((2, 2, 2), sset, tie_break=SEEDED_RANDOM, rng=rng).sigma for _ in range(60)}
    assert seen == {(1, 0, 0), (0, 1, 0), (0, 0, 1)}
    assert max_weight_schedule((2, 2, 2), sset).sigma == (1, 0, 0)


def test_overlapping_rows_rejected():
    sset = ScheduleSet.from_rows([ConstraintRow((1.0, 1.0, 0.0)), ConstraintRow((0.0, 1.0, 1.0))])
    with pytest.raises(OverlappingSupportError):
        ArgmaxSolver(sset)


@pytest.mark.parametrize(
    "Qtilde,rho,expected",
    [((4, 1), (1, 1), (1, 0)), ((4, 1), (8, 1), (0, 1)), ((0, 0), (1, 1), (0, 0))],
)
def test_largest_class(Qtilde, rho, expected):
    spec = one_queue_two_classes()
    sched = largest_class_schedule(Qtilde, inverse_weights(rho), spec)
    assert sched.class_split == expected
    assert sched.sigma == ((1,) if any(expected) else (0,))


def test_back_pressure_tandem():
    spec = build_tandem(2, 0.3)
    assert back_pressure_schedule((5, 0), spec).sigma[0] == 1


def test_back_pressure_simplex():
    P = np.array([[0.0, 1.0], [0.0, 0.0]])
    spec = NetworkSpec(("Q1", "Q2"), ("Q1", "Q2"), (0, 1), (), (1.0, 1.0), P,
                       ScheduleSet.from_rows([ConstraintRow((1.0, 1.0))]))
    assert back_pressure_weights((2, 5), spec) == [-3.0, 5.0]
    assert back_pressure_schedule((2, 5), spec).sigma == (0, 1)
    assert back_pressure_schedule((0, 0), spec).sigma == (0, 0)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(0, 20), min_size=5, max_size=5))
def test_back_pressure_skips_nonpositive_weights(Q):
    spec = build_tandem(5, 0.3)
    b = back_pressure_weights(Q, spec)
    sigma = back_pressure_schedule(Q, spec).sigma
    assert all(s == 0 for s, w in zip(sigma, b) if w <= 0)


def test_proportional_symmetric_split():
    sset = ScheduleSet.from_rows([ConstraintRow((1.0, 1.0))])
    assert proportional_target((1, 1), sset).tolist() == [0.5, 0.5]
    rng = np.random.default_rng(11)
    draws = [proportional_schedule((1, 1), sset, rng).sigma for _ in range(4000)]
    assert set(draws) == {(1, 0), (0, 1)}
    frac = sum(d == (1, 0) for d in draws) / len(draws)
    assert abs(frac - 0.5) < 3 * np.sqrt(0.25 / len(draws))


def test_proportional_single_supported_queue():
    sset = ScheduleSet.from_rows([ConstraintRow((1.0, 1.0))])
    assert proportional_target((3, 0), sset).tolist() == [1.0, 0.0]
    rng = np.random.default_rng(0)
    assert all(proportional_schedule((3, 0), sset, rng).sigma == (1, 0) for _ in range(20))


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.integers(0, 50), min_size=4, max_size=4),
    st.lists(st.floats(0.1, 10.0), min_size=4, max_size=4),
)
def test_proportional_scaling_correspondence(Q, m):
    sset = ScheduleSet.from_rows([ConstraintRow((1.0, 0.5, 0.0, 0.0)), ConstraintRow((0.0, 0.0, 0.25, 1.0))])
    scaled = scale_schedule_set(sset, m)
    assert np.allclose(proportional_target(Q, scaled), np.asarray(m) * proportional_target(Q, sset), atol=1e-9)


def test_proportional_mean_matches_target_for_unit_fraction_rows():
    sset = ScheduleSet.from_rows([ConstraintRow((1.0, 0.5, 0.25))])
    Q = (2, 3, 5)
    rng = np.random.default_rng(5)
    n = 20_000
    mean = np.mean([proportional_schedule(Q, sset, rng).sigma for _ in range(n)], axis=0)
    target = proportional_target(Q, sset)
    assert np.all(np.abs(mean - target) < 4 * 4 / np.sqrt(n))


@pytest.mark.parametrize(
    "doc,error",
    [
        ({"kind": "Nope"}, "unknown policy kind"),
        ({"kind": WEIGHTED_MAX_WEIGHT}, "requires queue weights"),
        ({"kind": MAX_WEIGHT, "weights": [1, 0]}, "strictly positive"),
        ({"kind": MAX_WEIGHT, "tie_break": "coin"}, "tie_break"),
    ],
)
def test_config_validation(doc, error):
    with pytest.raises(ValueError, match=error):
        PolicyConfig.from_json(doc)


def test_auto_rho_resolution():
    spec, _ = build_instability_network(7 / 12, 6, 30)
    cfg = PolicyConfig.from_json({"kind": WEIGHTED_MAX_WEIGHT, "weights": "auto_rho"}, spec)
    w = dict(zip(spec.queues, cfg.weights))
    assert w["A0"] == pytest.approx(12 / 7)
    assert w["A1"] == pytest.approx(30 * 12 / 7)


def test_largest_class_defaults_to_inverse_class_load():
    spec, _ = build_multiclass_rs(1.0, 0.1791, 4)
    cfg = PolicyConfig.from_json({"kind": LARGEST_CLASS}, spec)
    assert cfg.class_weights == pytest.approx((1.0,) * spec.n_classes)
    with pytest.raises(ValueError, match="class weights"):
        PolicyConfig(kind=LARGEST_CLASS)


def test_runtime_policy_kinds_agree_with_functions():
    spec = build_tandem(3, 0.4)
    Q = [3, 0, 2]
    rng = np.random.default_rng(0)
    assert Policy(PolicyConfig(MAX_WEIGHT), spec).decide(Q, None, rng)[0] == list(max_weight_schedule(Q, spec.schedule_set).sigma)
    assert Policy(PolicyConfig(BACK_PRESSURE), spec).decide(Q, None, rng)[0] == list(back_pressure_schedule(Q, spec).sigma)
    sigma, split = Policy(PolicyConfig(PROPORTIONAL), spec).decide(Q, None, rng)
    assert split is None and sigma == [1, 0, 1]
