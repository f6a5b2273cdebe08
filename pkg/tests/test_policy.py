import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgesched.model import ConfigError, PolicyParams, SimConfig
from edgesched.policy import (
    SCALE_UP,
    AssignmentDecision,
    Verdict,
    assignment_probability,
    high_migration_probability,
    make_policy,
    pdma_assign,
    scale_up,
)
from edgesched.world import PlacementFailure

from conftest import ScriptedRng, make_bundle, start_world

LINE3 = [[0, 10, 30], [10, 0, 10], [30, 10, 0]]


# decision functions

@pytest.mark.parametrize("p", [0.5, 1, 2, 4])
@pytest.mark.parametrize("T", [0.5, 0.9, 1.0])
def test_assignment_examples(p, T):
    assert assignment_probability(T, p, T) == 0.0
    assert assignment_probability(0.0, p, T) == 0.0
    assert assignment_probability(p * T / (p + 1), p, T) == pytest.approx(1.0, abs=1e-12)


def test_assignment_p1_hand_value():
    m1 = 0.25 * 0.81
    assert m1 == pytest.approx(0.2025)
    assert assignment_probability(0.45, 1.0, 0.9) == pytest.approx(0.45 * 0.45 / m1, abs=1e-12)
    assert assignment_probability(0.2, 1.0, 0.9) == pytest.approx(0.2 * 0.7 / m1, abs=1e-12)


@given(st.floats(-10, 10, allow_nan=False), st.floats(0.05, 8), st.floats(0.05, 1.0))
def test_assignment_in_unit_interval(x, p, T):
    v = assignment_probability(x, p, T)
    assert 0.0 <= v <= 1.0
    if x >= T or x <= 0:
        assert v == 0.0


@given(st.floats(0.1, 6), st.floats(0.1, 1.0))
def test_assignment_unimodal_peak(p, T):
    grid = np.linspace(0, T, 4001)
    vals = assignment_probability(grid, p, T)
    peak = assignment_probability(p * T / (p + 1), p, T)
    assert np.all(vals <= peak + 1e-12)
    k = int(np.argmax(vals))
    assert np.all(np.diff(vals[: k + 1]) >= -1e-12)
    assert np.all(np.diff(vals[k:]) <= 1e-12)


def test_assignment_rejects_bad_shape():
    with pytest.raises(ConfigError):
        assignment_probability(0.3, 0.0, 0.9)
    with pytest.raises(ConfigError):
        assignment_probability(0.3, 1.0, 1.5)


def test_migration_examples():
    assert high_migration_probability(1.0, 0.9, 0.25) == pytest.approx(1.0, abs=1e-12)
    assert high_migration_probability(0.9, 0.9, 0.25) == pytest.approx(0.0, abs=1e-12)
    assert high_migration_probability(0.95, 0.9, 0.25) == pytest.approx(0.5 ** 0.25, abs=1e-12)
    assert high_migration_probability(0.5, 0.9, 0.25) == 0.0
    assert high_migration_probability(1.7, 0.9, 0.25) == 1.0


def test_migration_threshold_one_is_error():
    with pytest.raises(ConfigError):
        high_migration_probability(0.95, 1.0, 0.25)


@given(st.floats(0.05, 8), st.floats(0.0, 0.99))
def test_migration_monotone(beta, th):
    vals = high_migration_probability(np.linspace(th, 1, 500), th, beta)
    assert np.all(np.diff(vals) >= -1e-12)
    assert np.all((vals >= 0) & (vals <= 1))


# Algorithm 1

def three_server_world(utils, user_x=0.0, reach=5000.0):
    b = make_bundle([(0, 0), (500, 0), (1000, 0)], [[(user_x, 0)]], capacities=[10000.0] * 3)
    cfg = SimConfig(horizon_intervals=1, knn_k=1, policy=PolicyParams(distance_threshold_m=reach))
    w = start_world(b, cfg, LINE3)
    w.powered[:] = True
    w.load = np.array(utils, dtype=float) * w.cap
    return w, cfg.policy


def test_hand_traced_assignment():
    # probabilities 0.6914, 1.0, 0.8889; draws reject server 0, accept 1 and 2
    w, params = three_server_world([0.2, 0.45, 0.6])
    log = []
    rng = ScriptedRng([0.8, 0.95, 0.5])
    assert pdma_assign(w, 0, rng, params, initial=True, decisions=log) == 1
    assert [d.verdict for d in log] == [Verdict.REJECT, Verdict.ACCEPT, Verdict.ACCEPT]
    assert [round(d.trial_probability, 4) for d in log] == [0.6914, 1.0, 0.8889]
    assert rng.calls == [3]


def test_hand_traced_assignment_seeded():
    w, params = three_server_world([0.2, 0.45, 0.6])
    draws = np.random.default_rng(7).random(3)
    probs = [0.2 * 0.7 / 0.2025, 1.0, 0.6 * 0.3 / 0.2025]
    accepted = [j for j in range(3) if draws[j] < probs[j]]
    expect = min(accepted) if accepted else SCALE_UP  # servers are ordered by distance from x=0
    assert pdma_assign(w, 0, np.random.default_rng(7), params, initial=True) == expect


def test_decision_verdict_matches_draw():
    w, params = three_server_world([0.1, 0.3, 0.7])
    log = []
    pdma_assign(w, 0, np.random.default_rng(3), params, initial=True, decisions=log)
    assert len(log) == 3
    for d in log:
        assert isinstance(d, AssignmentDecision)
        assert (d.verdict is Verdict.ACCEPT) == (d.rng_draw < d.trial_probability)


def test_all_servers_saturated_scale_up():
    w, params = three_server_world([0.9, 0.95, 1.3])
    assert pdma_assign(w, 0, np.random.default_rng(0), params, initial=True) == SCALE_UP


def test_single_eligible_server_with_zero_draw():
    w, params = three_server_world([0.95, 0.3, 0.95])
    assert pdma_assign(w, 0, ScriptedRng([0.0, 0.0, 0.0]), params, initial=True) == 1


def test_nearest_acceptor_to_service_location():
    w, params = three_server_world([0.45, 0.45, 0.45], user_x=1000.0)
    # user sits at station 2; every server accepts with probability 1
    assert pdma_assign(w, 0, ScriptedRng([0.5] * 3), params, initial=True) == 2


def test_delay_filter_still_consumes_draws():
    w, params = three_server_world([0.45, 0.45, 0.45])
    params = PolicyParams(delay_threshold_ms=15.0, distance_threshold_m=5000.0)
    rng = ScriptedRng([0.1, 0.1, 0.1])
    assert pdma_assign(w, 0, rng, params, initial=True) == 0
    assert rng.calls == [3]
    params = PolicyParams(delay_threshold_ms=25.0, distance_threshold_m=5000.0)
    w.powered[0] = False
    assert pdma_assign(w, 0, ScriptedRng([0.1] * 3), params, initial=True) == 1


def test_reach_excludes_far_servers():
    w, params = three_server_world([0.95, 0.45, 0.45], reach=600.0)
    assert pdma_assign(w, 0, ScriptedRng([0.0] * 3), params, initial=True) == 1
    w.load[1] = 0.95 * w.cap[1]
    assert pdma_assign(w, 0, ScriptedRng([0.0] * 3), params, initial=True) == SCALE_UP


def test_excluded_servers_skipped():
    w, params = three_server_world([0.45, 0.45, 0.45])
    assert pdma_assign(w, 0, ScriptedRng([0.0] * 3), params, initial=True, exclude=[0, 1]) == 2


def test_admission_cap_respected_by_assignment():
    w, params = three_server_world([0.45, 0.45, 0.45])
    w.reqsum[0] = 2 * w.cap[0] - 1000.0  # the 2000-MIPS request no longer fits
    assert pdma_assign(w, 0, ScriptedRng([0.0] * 3), params, initial=True) == 1


# scale-up pool

def test_scale_up_spare_at_user_station():
    w, _ = three_server_world([0, 0, 0], user_x=500.0)
    w.powered[:] = False
    assert scale_up(w, 0) == 1
    assert w.powered[1]


def test_scale_up_nearer_of_two_spares():
    b = make_bundle([(0, 0), (500, 0), (1200, 0)], [[(500, 0)]])
    w = start_world(b, SimConfig(horizon_intervals=1, knn_k=1), LINE3)
    w.powered[:] = [False, True, False]
    assert scale_up(w, 0) == 0
    w.powered[:] = [True, True, False]
    assert scale_up(w, 0) == 2


def test_scale_up_empty_pool():
    w, _ = three_server_world([0, 0, 0])
    with pytest.raises(PlacementFailure):
        scale_up(w, 0)


# Algorithm 2

def overload_world():
    # server 0: 3500 + 3000 + 2750 + 2750 = 12000 MIPS demand on 10000 capacity
    b = make_bundle([(0, 0), (300, 0)], [[(0, 0)]] * 4, capacities=[10000.0, 10000.0],
                    requested=[3500.0, 3000.0, 5500.0, 2750.0], workloads=[[1.0], [1.0], [0.5], [1.0]])
    cfg = SimConfig(horizon_intervals=1, knn_k=1)
    w = start_world(b, cfg, [[0, 10], [10, 0]])
    for r in range(4):
        w.place(r, 0)
    return w, cfg


def test_overload_evicts_largest_once():
    w, cfg = overload_world()
    assert w.utilization()[0] == pytest.approx(1.2)
    pol = make_policy("pdma", cfg.policy, np.random.default_rng(0))
    moves = pol.migrate_pass(w)
    assert moves == [(0, 0, 1)]
    assert w.utilization()[0] == pytest.approx(0.85)


def test_quiet_world_no_migrations():
    b = make_bundle([(0, 0), (300, 0)], [[(0, 0)], [(300, 0)]])
    cfg = SimConfig(horizon_intervals=1, knn_k=1)
    w = start_world(b, cfg, [[0, 10], [10, 0]])
    w.place(0, 0)
    w.place(1, 1)
    assert make_policy("pdma", cfg.policy, np.random.default_rng(0)).migrate_pass(w) == []


def test_delay_exactly_threshold_migrates():
    b = make_bundle([(0, 0), (300, 0)], [[(0, 0)]])
    cfg = SimConfig(horizon_intervals=1, knn_k=1)
    w = start_world(b, cfg, [[0, 40], [40, 0]])
    w.place(0, 1)
    td = float(w.comm_delays()[0])
    params = PolicyParams(delay_threshold_ms=td)
    moves = make_policy("pdma", params, np.random.default_rng(0)).migrate_pass(w)
    assert moves == [(0, 1, 0)]
    # a hair above the current delay leaves it alone
    w.remove(0)
    w.place(0, 1)
    params = PolicyParams(delay_threshold_ms=math.nextafter(td, math.inf))
    assert make_policy("pdma", params, np.random.default_rng(0)).migrate_pass(w) == []


def test_failed_reassignment_stays_put():
    w, cfg = overload_world()
    w.powered[1] = True
    w.load[1] = 0.95 * w.cap[1]  # no acceptor, and no idle server left
    w.reqsum[1] = 1.0
    pol = make_policy("pdma", cfg.policy, np.random.default_rng(0))
    assert pol.migrate_pass(w) == []
    assert pol.failures == 1
    assert list(w.placement) == [0, 0, 0, 0]


# baselines

def walk_bundle():
    stations = [(0, 0), (500, 0), (1000, 0), (1500, 0)]
    path = [(0, 0), (400, 0), (1100, 0), (1500, 0)]
    return make_bundle(stations, [path, [(0, 0)] * 4])


def drive(policy, bundle, cfg, seed=0):
    from edgesched.network import regenerate_delay_matrix
    from edgesched.world import World

    w = World(bundle, cfg)
    pol = make_policy(policy, cfg.policy, np.random.default_rng(seed))
    rng = np.random.default_rng(seed)
    trail = []
    for t in range(cfg.horizon_intervals):
        w.begin_interval(t, regenerate_delay_matrix(w.stations, cfg, rng, t))
        for r in np.flatnonzero(w.active & (w.placement < 0)):
            try:
                w.place(int(r), pol.assign(w, int(r), initial=True))
            except PlacementFailure:
                pass
        moves = pol.migrate_pass(w)
        trail.append((list(w.placement), moves))
        w.power_off_idle()
    return trail


def test_nf_follows_station():
    cfg = SimConfig(horizon_intervals=4, knn_k=1, policy=PolicyParams(distance_threshold_m=300.0))
    trail = drive("nf", walk_bundle(), cfg)
    assert [p[0] for p, _ in trail] == [0, 1, 2, 3]
    assert [m for _, m in trail] == [[], [(0, 0, 1)], [(0, 1, 2)], [(0, 2, 3)]]


def test_nf_hysteresis_keeps_station_in_range():
    cfg = SimConfig(horizon_intervals=4, knn_k=1, policy=PolicyParams(distance_threshold_m=1000.0))
    trail = drive("nf", walk_bundle(), cfg)
    # 400 m and then 1100 m from station 0: stays, then hands over to the nearest (2)
    assert [p[0] for p, _ in trail] == [0, 0, 2, 2]


def test_nm_never_moves():
    cfg = SimConfig(horizon_intervals=4, knn_k=1, policy=PolicyParams(distance_threshold_m=300.0))
    trail = drive("nm", walk_bundle(), cfg)
    assert all(m == [] for _, m in trail)
    assert [p[0] for p, _ in trail] == [0, 0, 0, 0]


def test_nf_falls_back_to_nearest_admissible():
    b = make_bundle([(0, 0), (500, 0), (2000, 0)], [[(0, 0)]], requested=[9000.0], capacities=[4000.0] * 3)
    cfg = SimConfig(horizon_intervals=1, knn_k=1)
    w = start_world(b, cfg, [[0, 10, 20], [10, 0, 10], [20, 10, 0]])
    with pytest.raises(PlacementFailure):
        make_policy("nf", cfg.policy, np.random.default_rng(0)).assign(w, 0, initial=True)
    w.cap[1] = 5000.0
    assert make_policy("nf", cfg.policy, np.random.default_rng(0)).assign(w, 0, initial=True) == 1


def test_topk_picks_among_busiest():
    n = 25
    b = make_bundle([(100 * i, 0) for i in range(n)], [[(0, 0)]])
    cfg = SimConfig(horizon_intervals=1, knn_k=2)
    w = start_world(b, cfg, seed=1)
    w.load = np.linspace(0.0, 0.96, n) * w.cap
    pol = make_policy("topk", cfg.policy, np.random.default_rng(4))
    picks = {pol.assign(w, 0, initial=True) for _ in range(300)}
    # K = ceil(0.1 * 25) = 3
    assert picks == {22, 23, 24}


def test_unknown_policy():
    with pytest.raises(ConfigError):
        make_policy("random", PolicyParams(), np.random.default_rng(0))


# properties over small random worlds

def random_world(seed, J, R):
    rng = np.random.default_rng(seed)
    st_xy = [tuple(p) for p in rng.uniform(0, 2000, (J, 2))]
    paths = [[tuple(p) for p in rng.uniform(0, 2000, (3, 2))] for _ in range(R)]
    wl = [list(rng.uniform(0.2, 1.0, 3)) for _ in range(R)]
    req = list(rng.choice([1000.0, 2500.0, 4000.0], R))
    return make_bundle(st_xy, paths, capacities=list(rng.choice([4000.0, 8000.0], J)), requested=req, workloads=wl)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 6), st.integers(1, 10), st.sampled_from(["pdma", "nf", "nm", "topk"]))
def test_admission_cap_never_exceeded(seed, J, R, policy):
    cfg = SimConfig(horizon_intervals=3, knn_k=1)
    b = random_world(seed, J, R)
    from edgesched.world import World
    from edgesched.network import regenerate_delay_matrix

    w = World(b, cfg)
    pol = make_policy(policy, cfg.policy, np.random.default_rng(seed))
    rng = np.random.default_rng(seed)
    for t in range(3):
        w.begin_interval(t, regenerate_delay_matrix(w.stations, cfg, rng, t))
        for r in np.flatnonzero(w.active & (w.placement < 0)):
            try:
                w.place(int(r), pol.assign(w, int(r), initial=True))
            except PlacementFailure:
                pass
        pol.migrate_pass(w)
        assert np.all(w.reqsum <= cfg.admission_cap * w.cap + 1e-6)
        assert np.all(w.ramsum <= w.cap_ram + 1e-6)
        w.check_integrity()
        w.power_off_idle()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 6), st.integers(1, 10))
def test_pdma_pass_is_reproducible(seed, J, R):
    cfg = SimConfig(horizon_intervals=3, knn_k=1)
    b = random_world(seed, J, R)
    assert drive("pdma", b, cfg, seed) == drive("pdma", b, cfg, seed)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 6), st.integers(1, 10))
def test_delay_violations_resolved(seed, J, R):
    """After a pass, a service still at or over the threshold went through a failed or scaled-up move."""
    from edgesched.network import regenerate_delay_matrix
    from edgesched.world import World

    cfg = SimConfig(horizon_intervals=3, knn_k=1, link_delay_min_ms=20, link_delay_max_ms=60)
    w = World(random_world(seed, J, R), cfg)
    pol = make_policy("pdma", cfg.policy, np.random.default_rng(seed))
    rng = np.random.default_rng(seed)
    for t in range(3):
        w.begin_interval(t, regenerate_delay_matrix(w.stations, cfg, rng, t))
        for r in np.flatnonzero(w.active & (w.placement < 0)):
            try:
                w.place(int(r), pol.assign(w, int(r), initial=True))
            except PlacementFailure:
                pass
        before = pol.failures
        powered_before = w.powered.copy()
        pol.migrate_pass(w)
        late = np.flatnonzero((w.placement >= 0) & (w.comm_delays() >= cfg.policy.delay_threshold_ms))
        for r in late:
            fresh = not powered_before[w.placement[r]]
            assert pol.failures > before or fresh
        w.power_off_idle()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(3, 6), st.integers(4, 12))
def test_drained_servers_end_below_threshold(seed, J, R):
    from edgesched.network import regenerate_delay_matrix
    from edgesched.world import World

    cfg = SimConfig(horizon_intervals=3, knn_k=1)
    w = World(random_world(seed, J, R), cfg)
    w.begin_interval(0, regenerate_delay_matrix(w.stations, cfg, np.random.default_rng(seed), 0))
    for r in range(w.R):
        if w.active[r]:
            try:
                w.place(r, make_policy("nf", cfg.policy, None).assign(w, r, initial=True))
            except PlacementFailure:
                pass
    pol = make_policy("pdma", cfg.policy, np.random.default_rng(seed))
    evicted, drained = pol._drain_overloaded(w)
    moves = pol._reassign(w, evicted, exclude=drained)
    if pol.failures == 0:
        util = w.utilization()
        assert all(util[j] <= cfg.overload_threshold + 1e-12 for j in drained)
    assert len(moves) + pol.failures == len(evicted)
