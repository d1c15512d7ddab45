import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ridesim.agents import Driver, Order
from ridesim.market import (
    MatchingProblem,
    OrderPool,
    PricingRule,
    RepositionMode,
    RepositionPolicy,
    build_matching_problem,
    choose_cruise_destination,
    demand_weights,
    generate_orders,
    load_order_pool,
    pickup_distance_value,
    price_order,
    solve_assignment,
    write_order_pool,
)
from ridesim.network import GridOverlay, RouteCache, build_network
from ridesim.synthetic import grid_city

from oracles import brute_force_assignment


def problem(reward, feasible=None):
    reward = np.asarray(reward, dtype=float)
    if feasible is None:
        feasible = np.ones(reward.shape, dtype=bool)
    feasible = np.asarray(feasible, dtype=bool)
    r = np.where(feasible, reward, -np.inf)
    n, m = reward.shape
    return MatchingProblem(np.arange(n), np.arange(m), r, feasible, np.zeros(reward.shape))


# pricing

def test_price_zero_distance_is_base():
    assert price_order(PricingRule(2.5, 0, 1.5), 0) == 2.5


def test_price_per_km():
    assert price_order(PricingRule(2.5, 0, 1.5), 4000) == pytest.approx(8.5)


def test_included_distance():
    rule = PricingRule(3.0, 1000, 2.0)
    assert price_order(rule, 800) == 3.0
    assert price_order(rule, 3000) == pytest.approx(7.0)


def test_negative_rate_rejected():
    with pytest.raises(ValueError):
        PricingRule(per_km_rate=-1.0)


# order generation

def _pool(n=1000, seed=0):
    rng = np.random.default_rng(seed)
    return OrderPool(np.sort(rng.uniform(0, 100, n)), rng.integers(0, 50, n), rng.integers(0, 50, n))


def test_fraction_zero_and_empty_pool():
    rng = np.random.default_rng(0)
    assert generate_orders(_pool(), 0, 100, 0.0, rng, trip_distance=lambda o, d: 1000.0) == []
    empty = OrderPool([], [], [])
    assert generate_orders(empty, 0, 100, 1.0, rng, trip_distance=lambda o, d: 1000.0) == []


def test_fixed_seed_reproduces_retained_set():
    pool = _pool()

    def once():
        rng = np.random.default_rng(42)
        return [(o.request_time, o.origin, o.destination)
                for o in generate_orders(pool, 0, 100, 0.5, rng, trip_distance=lambda o, d: 500.0)]

    a, b = once(), once()
    assert a == b
    assert 400 < len(a) < 600


def test_sample_fraction_expectation():
    pool = _pool(20000, seed=3)
    rng = np.random.default_rng(9)
    kept = len(generate_orders(pool, 0, 100, 0.1, rng, trip_distance=lambda o, d: 500.0))
    sigma = math.sqrt(20000 * 0.1 * 0.9)
    assert abs(kept - 2000) <= 3 * sigma


def test_window_is_half_open_and_fares_priced():
    pool = OrderPool([0.0, 5.0, 9.999, 10.0], [1, 2, 3, 4], [2, 3, 4, 5])
    got = generate_orders(pool, 0, 10, 1.0, None, trip_distance=lambda o, d: 4000.0,
                          pricing=PricingRule(2.5, 0, 1.5), first_id=7)
    assert [o.origin for o in got] == [1, 2, 3]
    assert [o.order_id for o in got] == [7, 8, 9]
    assert all(o.fare == pytest.approx(8.5) for o in got)


def test_pool_fare_column_overrides(tmp_path):
    pool = OrderPool([1.0, 2.0], [1, 2], [2, 1], fare=[11.0, 12.5])
    path = tmp_path / "pool.csv"
    write_order_pool(pool, path)
    back = load_order_pool(path)
    got = generate_orders(back, 0, 10, 1.0, None, trip_distance=lambda o, d: 99.0)
    assert [o.fare for o in got] == [11.0, 12.5]


def test_unreachable_trips_skipped():
    pool = OrderPool([1.0, 2.0], [1, 2], [2, 1])
    got = generate_orders(pool, 0, 10, 1.0, None, trip_distance=lambda o, d: math.inf if o == 1 else 10.0)
    assert [o.origin for o in got] == [2]


def test_pool_header_checked(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("t,o,d\n1,2,3\n")
    with pytest.raises(ValueError, match="header"):
        load_order_pool(p)


# matching problem

def _line():
    # nodes 0..5, 500 m apart
    nodes = [(i, -73.99 + 0.006 * i, 40.73) for i in range(6)]
    return build_network(nodes, [(i, i + 1, 500.0) for i in range(5)], undirected=True)


def test_empty_problem():
    p = build_matching_problem([], [Driver(0, 0, 6.0)], 2000, distances=None)
    assert p.shape == (0, 1)
    assert solve_assignment(p).pairs == []


def test_radius_feasibility():
    cache = RouteCache(_line())
    o = Order(0, origin=0, destination=5, fare=9.0, request_time=0.0)
    drivers = [Driver(0, 1, 6.0), Driver(1, 5, 6.0)]
    p = build_matching_problem([o], drivers, 2000, distances=cache.distance_matrix)
    # driver 0 is 500 m away, driver 1 is 2500 m away
    assert p.feasible.tolist() == [[True, False]]
    assert p.reward[0, 0] == 9.0 and p.reward[0, 1] == -np.inf


def test_hand_computed_3x3():
    cache = RouteCache(_line())
    orders = [Order(i, origin=n, destination=0, fare=1.0, request_time=0.0) for i, n in enumerate([0, 2, 5])]
    drivers = [Driver(j, n, 6.0) for j, n in enumerate([1, 3, 4])]
    p = build_matching_problem(orders, drivers, 1200, distances=cache.distance_matrix)
    expect_dist = [[500, 1500, 2000], [500, 500, 1000], [2000, 1000, 500]]
    expect_feas = [[d <= 1200 for d in row] for row in expect_dist]
    assert p.feasible.tolist() == expect_feas
    fin = p.feasible
    np.testing.assert_allclose(p.pickup_distance[fin], np.array(expect_dist, dtype=float)[fin])


def test_radius_must_be_positive():
    with pytest.raises(ValueError):
        build_matching_problem([], [], 0, distances=None)


# assignment

def test_single_pair():
    a = solve_assignment(problem([[5.0]]))
    assert a.pairs == [(0, 0)]
    assert a.objective_value == 5.0


def test_two_by_two():
    a = solve_assignment(problem([[3, 5], [4, 1]]))
    assert a.pairs == [(0, 1), (1, 0)]
    assert a.objective_value == 9.0


def test_leaves_agents_unmatched_rather_than_infeasible():
    a = solve_assignment(problem([[5, 7], [2, 1]], [[True, False], [True, False]]))
    assert a.pairs == [(0, 0)]
    assert a.objective_value == 5.0


def test_negative_rewards_not_forced():
    a = solve_assignment(problem([[-1.0, 2.0]]))
    assert a.pairs == [(0, 1)]


@pytest.mark.parametrize("seed", range(300))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(1, 7, size=2)
    reward = rng.integers(0, 20, size=(n, m)).astype(float)
    feasible = rng.random((n, m)) < 0.7
    best, _ = brute_force_assignment(reward, feasible)
    a = solve_assignment(problem(reward, feasible))
    assert a.objective_value == best
    assert len({o for o, _ in a.pairs}) == len(a.pairs)
    assert len({d for _, d in a.pairs}) == len(a.pairs)
    assert all(feasible[o, d] for o, d in a.pairs)


@settings(max_examples=150, deadline=None)
@given(st.data())
def test_float_rewards_match_brute_force(data):
    n = data.draw(st.integers(1, 5))
    m = data.draw(st.integers(1, 5))
    vals = data.draw(st.lists(st.floats(-5, 50, allow_nan=False), min_size=n * m, max_size=n * m))
    feas = data.draw(st.lists(st.booleans(), min_size=n * m, max_size=n * m))
    reward = np.array(vals).reshape(n, m)
    feasible = np.array(feas).reshape(n, m)
    best, _ = brute_force_assignment(reward, feasible)
    got = solve_assignment(problem(reward, feasible)).objective_value
    assert got == pytest.approx(best, rel=1e-9, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_permutation_invariance(data):
    n = data.draw(st.integers(1, 6))
    m = data.draw(st.integers(1, 6))
    seed = data.draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    reward = rng.integers(0, 30, size=(n, m)).astype(float)
    feasible = rng.random((n, m)) < 0.6
    a = solve_assignment(problem(reward, feasible))
    pr, pc = rng.permutation(n), rng.permutation(m)
    b = solve_assignment(problem(reward[np.ix_(pr, pc)], feasible[np.ix_(pr, pc)]))
    assert a.objective_value == b.objective_value
    # permuted pairs are a valid assignment in the original frame with the same value
    mapped = [(int(pr[i]), int(pc[j])) for i, j in b.pairs]
    assert sum(reward[i, j] for i, j in mapped) == a.objective_value
    assert all(feasible[i, j] for i, j in mapped)


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_dominated_column_never_hurts(data):
    n = data.draw(st.integers(1, 5))
    m = data.draw(st.integers(1, 5))
    seed = data.draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    reward = rng.integers(0, 30, size=(n, m)).astype(float)
    feasible = rng.random((n, m)) < 0.6
    base = solve_assignment(problem(reward, feasible)).objective_value
    k = int(rng.integers(m))
    extra = reward[:, k] - rng.integers(0, 5, size=n)
    r2 = np.column_stack([reward, extra])
    f2 = np.column_stack([feasible, feasible[:, k]])
    assert solve_assignment(problem(r2, f2)).objective_value >= base


def test_fare_objective_is_sum_of_matched_fares():
    orders = [Order(i, origin=n, destination=0, fare=f, request_time=0.0)
              for i, (n, f) in enumerate([(0, 4.0), (2, 7.5), (5, 3.25)])]
    drivers = [Driver(j, n, 6.0) for j, n in enumerate([1, 3])]
    cache = RouteCache(_line())
    p = build_matching_problem(orders, drivers, 2000, distances=cache.distance_matrix)
    a = solve_assignment(p)
    fares = {o.order_id: o.fare for o in orders}
    assert a.objective_value == sum(fares[o] for o, _ in a.pairs)
    for o, d in a.pairs:
        assert p.pickup_distance[o, d] <= 2000


def test_pdb_prefers_cardinality_then_distance():
    # two drivers, two orders; the shortest single pair would block the other match
    dist = np.array([[100.0, 200.0], [150.0, np.inf]])
    feasible = np.isfinite(dist)
    value = pickup_distance_value(2000.0, 2)
    reward = np.where(feasible, value(None, None, np.where(feasible, dist, 0), 0), -np.inf)
    p = MatchingProblem(np.arange(2), np.arange(2), reward, feasible, dist)
    a = solve_assignment(p)
    assert a.pairs == [(0, 1), (1, 0)]


# cruising

def test_single_cell_always_stays():
    net = grid_city(4, 4, seed=0)
    ov = GridOverlay(net, 1, 1)
    rng = np.random.default_rng(0)
    for mode in RepositionMode:
        pol = RepositionPolicy(mode, decide=(lambda g, t, a, r: 0) if mode == RepositionMode.INSTRUCTED else None)
        assert choose_cruise_destination(0, ov, pol, np.ones(1), rng) == 0


def test_degenerate_weights():
    net = grid_city(9, 9, seed=0)
    ov = GridOverlay(net, 3, 3)
    w = np.zeros(9)
    w[2] = 1.0
    rng = np.random.default_rng(0)
    pol = RepositionPolicy(RepositionMode.DEMAND_WEIGHTED)
    assert {choose_cruise_destination(4, ov, pol, w, rng) for _ in range(200)} == {2}


def test_uniform_weights_frequencies():
    net = grid_city(9, 9, seed=0)
    ov = GridOverlay(net, 3, 3)
    rng = np.random.default_rng(5)
    pol = RepositionPolicy(RepositionMode.DEMAND_WEIGHTED)
    n = 100_000
    counts = np.bincount([choose_cruise_destination(4, ov, pol, np.ones(9), rng) for _ in range(n)], minlength=9)
    p = 1 / 9
    assert np.all(np.abs(counts - n * p) <= 3 * math.sqrt(n * p * (1 - p)))


def test_random_neighbor_stays_in_neighborhood():
    net = grid_city(9, 9, seed=0)
    ov = GridOverlay(net, 3, 3)
    rng = np.random.default_rng(1)
    pol = RepositionPolicy(RepositionMode.RANDOM_NEIGHBOR)
    seen = {choose_cruise_destination(0, ov, pol, None, rng) for _ in range(500)}
    assert seen == {0, 1, 3, 4}


def test_instructed_restricted_to_neighbors():
    net = grid_city(9, 9, seed=0)
    ov = GridOverlay(net, 3, 3)
    far = RepositionPolicy(RepositionMode.INSTRUCTED, decide=lambda g, t, a, r: 8)
    assert choose_cruise_destination(0, ov, far, None, None) == 0
    near = RepositionPolicy(RepositionMode.INSTRUCTED, decide=lambda g, t, a, r: a[8])
    assert choose_cruise_destination(0, ov, near, None, None) == 4
    with pytest.raises(ValueError):
        RepositionPolicy(RepositionMode.INSTRUCTED)


def test_demand_weights_by_hour():
    net = grid_city(6, 6, seed=0)
    ov = GridOverlay(net, 2, 2)
    n0 = int(net.node_ids[0])
    pool = OrderPool([10.0, 20.0, 3700.0], [n0, n0, n0], [n0, n0, n0])
    w = demand_weights(pool, ov)
    g = ov.node_to_grid(n0)
    assert w[0, g] == 2 and w[1, g] == 1
    assert w.sum() == 3
