import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ridesim.agents import (
    NEVER_CANCEL,
    BehaviorConfig,
    CancelCurve,
    Driver,
    DriverStatus,
    InvalidTransition,
    Order,
    OrderStatus,
    advance_driver,
    apply_offline_schedule,
    driver_reaction,
    passenger_reaction,
    tally,
)
from ridesim.network import Route


def route(nodes, legs):
    return Route(tuple(nodes), tuple(float(x) for x in legs))


def order(**kw):
    base = dict(order_id=1, origin=0, destination=3, fare=10.0, request_time=0.0, max_wait=300.0)
    base.update(kw)
    return Order(**base)


def test_order_transitions_enforced():
    o = order()
    o.move(OrderStatus.MATCHED_WAITING_PICKUP)
    o.move(OrderStatus.IN_DELIVERY)
    with pytest.raises(InvalidTransition):
        o.move(OrderStatus.CANCELLED)
    o.move(OrderStatus.FINISHED)
    assert not o.active
    with pytest.raises(InvalidTransition):
        o.move(OrderStatus.UNMATCHED)


def test_negative_fare_rejected():
    with pytest.raises(ValueError):
        order(fare=-1.0)


def test_behavior_validation():
    with pytest.raises(ValueError):
        CancelCurve(100.0, 1.5)
    with pytest.raises(ValueError):
        BehaviorConfig(max_idle_time=-1)
    with pytest.raises(ValueError):
        BehaviorConfig(max_wait=300, max_wait_high=100)


def test_sampled_max_wait_in_range():
    b = BehaviorConfig(max_wait=200, max_wait_high=400)
    rng = np.random.default_rng(0)
    draws = [b.sample_max_wait(rng) for _ in range(500)]
    assert min(draws) >= 200 and max(draws) <= 400
    assert BehaviorConfig().sample_max_wait(rng) == 300


# movement

def test_idle_driver_only_accumulates_idle_time():
    d = Driver(0, node=5, speed=10.0)
    assert advance_driver(d, 60.0) == []
    assert d.node == 5
    assert d.idle_time == 60.0


def test_linear_motion_within_leg():
    d = Driver(0, node=0, speed=10.0, status=DriverStatus.CRUISING)
    d.install(route([0, 1], [100]))
    advance_driver(d, 5.0)
    assert d.itinerary.cursor == 0
    assert d.itinerary.remaining == pytest.approx(5.0)
    assert d.status == DriverStatus.CRUISING


def test_pickup_carryover_into_delivery():
    # 10 m to the pickup node at 10 m/s, then a 1000 m delivery leg
    d = Driver(0, node=0, speed=10.0, status=DriverStatus.PICKING_UP, serving_order=7)
    d.install(route([0, 1], [10]))
    d.delivery_route = route([1, 2], [1000])
    events = advance_driver(d, 60.0, now=100.0)
    assert events == [("pickup", 101.0)]
    assert d.status == DriverStatus.DELIVERING
    # 59 s spent on the delivery leg: 590 m done, 410 m left
    assert d.itinerary.remaining == pytest.approx(41.0)
    assert d.itinerary.remaining_seconds() == pytest.approx(41.0)


def test_short_trip_completes_within_one_step():
    d = Driver(0, node=0, speed=10.0, status=DriverStatus.PICKING_UP, serving_order=7)
    d.install(route([0, 1], [10]))
    d.delivery_route = route([1, 2], [20])
    events = advance_driver(d, 60.0)
    assert events == [("pickup", 1.0), ("dropoff", 3.0)]
    assert d.status == DriverStatus.IDLE
    assert d.serving_order is None
    assert d.node == 2
    assert d.idle_time == pytest.approx(57.0)


def test_zero_length_pickup():
    d = Driver(0, node=1, speed=10.0, status=DriverStatus.PICKING_UP, serving_order=7)
    d.install(route([1], []))
    d.delivery_route = route([1, 2], [100])
    assert advance_driver(d, 5.0, now=0.0) == [("pickup", 0.0)]
    assert d.itinerary.remaining == pytest.approx(5.0)


def test_cruise_arrival():
    d = Driver(0, node=0, speed=5.0, status=DriverStatus.CRUISING, cruise_grid=3)
    d.install(route([0, 1, 2], [10, 10]))
    assert advance_driver(d, 5.0) == [("arrive", 4.0)]
    assert d.status == DriverStatus.IDLE
    assert d.cruise_grid is None


def test_bad_dt():
    with pytest.raises(ValueError):
        advance_driver(Driver(0, 0, 1.0), 0.0)


@settings(max_examples=100, deadline=None)
@given(legs=st.lists(st.floats(0.5, 500), min_size=1, max_size=8), speed=st.floats(1, 20),
       steps=st.lists(st.floats(0.1, 30), min_size=1, max_size=20))
def test_cursor_remaining_within_leg(legs, speed, steps):
    d = Driver(0, node=0, speed=speed, status=DriverStatus.CRUISING)
    d.install(route(range(len(legs) + 1), legs))
    total = sum(legs) / speed
    elapsed = 0.0
    for dt in steps:
        fired = advance_driver(d, dt, now=elapsed)
        elapsed += dt
        if fired:
            assert fired[0][0] == "arrive"
            assert fired[0][1] == pytest.approx(total, rel=1e-9, abs=1e-9)
            break
        it = d.itinerary
        assert 0 <= it.remaining <= legs[it.cursor] / speed + 1e-9
        assert it.remaining_seconds() == pytest.approx(total - elapsed, rel=1e-9, abs=1e-6)


# passenger reactions

def test_passenger_cancels_at_max_wait():
    o = order(current_wait=299.0)
    assert passenger_reaction(o, None, 5.0, None) == OrderStatus.CANCELLED


def test_passenger_keeps_waiting():
    o = order(current_wait=290.0)
    assert passenger_reaction(o, None, 5.0, None) == OrderStatus.UNMATCHED
    assert o.current_wait == 295.0


def test_passenger_accepts_with_zero_probability():
    o = order()
    assert passenger_reaction(o, (4, 2500.0), 5.0, None) == OrderStatus.MATCHED_WAITING_PICKUP
    assert o.driver_id == 4


def test_step_curve_cancels_far_match():
    o = order(cancel_curve=CancelCurve(2000.0, 1.0))
    assert passenger_reaction(o, (4, 2500.0), 5.0, None) == OrderStatus.CANCELLED
    o = order(cancel_curve=CancelCurve(2000.0, 1.0))
    assert passenger_reaction(o, (4, 2000.0), 5.0, None) == OrderStatus.MATCHED_WAITING_PICKUP


def test_partial_cancel_probability_frequency():
    rng = np.random.default_rng(11)
    curve = CancelCurve(100.0, 0.3)
    n = 20000
    cancelled = sum(passenger_reaction(order(cancel_curve=curve), (0, 500.0), 5.0, rng) == OrderStatus.CANCELLED
                    for _ in range(n))
    assert abs(cancelled / n - 0.3) < 3 * math.sqrt(0.3 * 0.7 / n)


def test_passenger_reaction_requires_waiting_order():
    o = order(status=OrderStatus.FINISHED)
    with pytest.raises(InvalidTransition):
        passenger_reaction(o, None, 5.0, None)


# driver reactions

def test_driver_stays_idle_before_limit():
    d = Driver(0, 0, 6.0, idle_time=0.0, max_idle_time=120.0)
    assert driver_reaction(d, None, None) is False
    assert d.status == DriverStatus.IDLE


def test_driver_starts_cruising_at_limit():
    d = Driver(0, 0, 6.0, idle_time=120.0, max_idle_time=120.0)
    driver_reaction(d, None, None)
    assert d.status == DriverStatus.CRUISING


def test_leaving_driver_does_not_cruise():
    d = Driver(0, 0, 6.0, idle_time=500.0, max_idle_time=120.0, offline_time=100.0)
    driver_reaction(d, None, None, now=100.0)
    assert d.status == DriverStatus.IDLE


def test_driver_accepts_and_installs_route():
    d = Driver(0, 0, 6.0, idle_time=40.0)
    o = order(status=OrderStatus.MATCHED_WAITING_PICKUP, driver_id=0)
    pick = route([0, 1], [50])
    assert driver_reaction(d, o, None, pickup_route=pick, delivery_route=route([1, 3], [80]))
    assert d.status == DriverStatus.PICKING_UP
    assert d.serving_order == o.order_id
    assert d.itinerary.route == pick
    assert d.idle_time == 0.0


def test_driver_rejection_returns_order_to_pool():
    d = Driver(0, 0, 6.0)
    o = order(status=OrderStatus.MATCHED_WAITING_PICKUP, driver_id=0, pickup_distance=900.0)
    ok = driver_reaction(d, o, None, pickup_route=route([0, 1], [900]), delivery_route=route([1, 3], [80]),
                         cancel_curve=CancelCurve(500.0, 1.0))
    assert not ok
    assert d.status == DriverStatus.IDLE
    assert d.serving_order is None
    assert o.status == OrderStatus.UNMATCHED
    assert o.driver_id is None


# offline schedule

def test_never_offline_by_default():
    d = Driver(0, 0, 6.0)
    assert not apply_offline_schedule(d, 1e12)


def test_idle_driver_offline_at_boundary():
    d = Driver(0, 0, 6.0, offline_time=3600.0)
    assert not apply_offline_schedule(d, 3599.0)
    assert apply_offline_schedule(d, 3600.0)
    assert d.status == DriverStatus.OFFLINE


def test_delivering_driver_finishes_first():
    d = Driver(0, 0, 10.0, status=DriverStatus.DELIVERING, serving_order=3, offline_time=3600.0)
    d.install(route([0, 1], [40]))
    assert not apply_offline_schedule(d, 3600.0)
    assert d.status == DriverStatus.DELIVERING
    assert advance_driver(d, 5.0, now=3600.0) == [("dropoff", 3604.0)]
    assert apply_offline_schedule(d, 3605.0)
    assert d.status == DriverStatus.OFFLINE


def test_offline_sampling():
    rng = np.random.default_rng(0)
    assert BehaviorConfig().sample_offline_time(0, rng) == math.inf
    b = BehaviorConfig(offline_time=3600, offline_spread=600)
    t = b.sample_offline_time(100, rng)
    assert 3700 <= t <= 4300


def test_tally_counts():
    orders = [order(order_id=i) for i in range(5)]
    orders[0].status = OrderStatus.FINISHED
    orders[1].status = OrderStatus.CANCELLED
    orders[2].status = OrderStatus.IN_DELIVERY
    t = tally(orders)
    assert (t.produced, t.finished, t.cancelled, t.matched) == (5, 1, 1, 1)
    assert t.by_status[OrderStatus.UNMATCHED] == 2
    assert NEVER_CANCEL(1e9) == 0.0
