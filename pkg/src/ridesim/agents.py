"""Passengers (orders), drivers, and their behavioral rules."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

from .network import Route


class OrderStatus(enum.Enum):
    UNMATCHED = "unmatched"
    MATCHED_WAITING_PICKUP = "matched_waiting_pickup"
    IN_DELIVERY = "in_delivery"
    FINISHED = "finished"
    CANCELLED = "cancelled"


class DriverStatus(enum.Enum):
    IDLE = "idle"
    CRUISING = "cruising"
    PICKING_UP = "picking_up"
    DELIVERING = "delivering"
    OFFLINE = "offline"


AVAILABLE = (DriverStatus.IDLE, DriverStatus.CRUISING)
IN_SERVICE = (DriverStatus.PICKING_UP, DriverStatus.DELIVERING)

_ORDER_MOVES = {
    OrderStatus.UNMATCHED: {OrderStatus.MATCHED_WAITING_PICKUP, OrderStatus.CANCELLED},
    # back to UNMATCHED only when the driver turns the tentative match down
    OrderStatus.MATCHED_WAITING_PICKUP: {OrderStatus.IN_DELIVERY, OrderStatus.CANCELLED, OrderStatus.UNMATCHED},
    OrderStatus.IN_DELIVERY: {OrderStatus.FINISHED},
    OrderStatus.FINISHED: set(),
    OrderStatus.CANCELLED: set(),
}


class InvalidTransition(RuntimeError):
    pass


@dataclass(frozen=True)
class CancelCurve:
    """Step curve: cancel with `probability` when pickup distance exceeds `threshold_m`."""

    threshold_m: float = math.inf
    probability: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"cancel probability {self.probability} outside [0, 1]")
        if self.threshold_m < 0:
            raise ValueError("cancel threshold must be >= 0")

    def __call__(self, pickup_distance):
        return self.probability if pickup_distance > self.threshold_m else 0.0


NEVER_CANCEL = CancelCurve()


@dataclass(frozen=True)
class BehaviorConfig:
    max_wait: float = 300.0
    max_wait_high: Optional[float] = None  # set -> per-order max wait ~ U[max_wait, max_wait_high]
    passenger_cancel: CancelCurve = NEVER_CANCEL
    driver_cancel: CancelCurve = NEVER_CANCEL
    max_idle_time: float = 120.0
    offline_time: float = math.inf  # seconds after simulation start
    offline_spread: float = 0.0  # per-driver offline time ~ offline_time + U[0, spread]

    def __post_init__(self):
        for name in ("max_wait", "max_idle_time", "offline_time", "offline_spread"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.max_wait_high is not None and self.max_wait_high < self.max_wait:
            raise ValueError("max_wait_high must be >= max_wait")

    def sample_max_wait(self, rng):
        if self.max_wait_high is None:
            return self.max_wait
        return float(rng.uniform(self.max_wait, self.max_wait_high))

    def sample_offline_time(self, start, rng):
        if math.isinf(self.offline_time):
            return math.inf
        jitter = float(rng.uniform(0.0, self.offline_spread)) if self.offline_spread > 0 else 0.0
        return start + self.offline_time + jitter


@dataclass
class Order:
    order_id: int
    origin: int
    destination: int
    fare: float
    request_time: float
    trip_distance: float = 0.0
    max_wait: float = math.inf
    cancel_curve: CancelCurve = NEVER_CANCEL
    status: OrderStatus = OrderStatus.UNMATCHED
    current_wait: float = 0.0
    driver_id: Optional[int] = None
    pickup_distance: Optional[float] = None
    match_time: Optional[float] = None
    pickup_time: Optional[float] = None
    end_time: Optional[float] = None

    def __post_init__(self):
        if self.fare < 0:
            raise ValueError("fare must be >= 0")

    def move(self, status):
        if status not in _ORDER_MOVES[self.status]:
            raise InvalidTransition(f"order {self.order_id}: {self.status.name} -> {status.name}")
        self.status = status

    @property
    def active(self):
        return self.status not in (OrderStatus.FINISHED, OrderStatus.CANCELLED)


@dataclass
class Itinerary:
    route: Route
    speed: float
    cursor: int = 0  # index of the last node reached
    remaining: float = 0.0  # seconds to the next node

    def __post_init__(self):
        if self.route.leg_lengths:
            self.remaining = self.route.leg_lengths[0] / self.speed

    @property
    def complete(self):
        return self.cursor >= len(self.route.leg_lengths)

    @property
    def node(self):
        return self.route.node_sequence[self.cursor]

    def remaining_seconds(self):
        if self.complete:
            return 0.0
        rest = sum(self.route.leg_lengths[self.cursor + 1:])
        return self.remaining + rest / self.speed

    def consume(self, budget):
        """Move along for up to `budget` seconds; return the unused seconds."""
        legs = self.route.leg_lengths
        while budget > 0 and self.cursor < len(legs):
            if self.remaining <= budget:
                budget -= self.remaining
                self.cursor += 1
                self.remaining = legs[self.cursor] / self.speed if self.cursor < len(legs) else 0.0
            else:
                self.remaining -= budget
                budget = 0.0
        return budget if self.complete else 0.0


@dataclass
class Driver:
    driver_id: int
    node: int
    speed: float
    status: DriverStatus = DriverStatus.IDLE
    serving_order: Optional[int] = None
    idle_time: float = 0.0
    max_idle_time: float = math.inf
    offline_time: float = math.inf
    itinerary: Optional[Itinerary] = None
    delivery_route: Optional[Route] = None
    cruise_grid: Optional[int] = None

    def __post_init__(self):
        if self.speed <= 0:
            raise ValueError("speed must be > 0")

    def install(self, route):
        self.itinerary = Itinerary(route, self.speed)

    def leaving(self, now):
        return now >= self.offline_time


def advance_driver(d: Driver, dt: float, now: float = 0.0):
    """Advance a driver by `dt` seconds starting at time `now`.

    Returns the list of (event, time) pairs that fired: "pickup", "dropoff"
    and "arrive" (end of a cruise).  Leftover time carries from pickup into
    delivery; whatever is left after that is spent idle.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    events = []
    status = d.status
    if status == DriverStatus.OFFLINE:
        return events
    if status == DriverStatus.IDLE:
        d.idle_time += dt
        return events

    left = d.itinerary.consume(dt)
    d.node = d.itinerary.node
    if not d.itinerary.complete:
        return events

    t = now + dt - left
    if status == DriverStatus.PICKING_UP:
        events.append(("pickup", t))
        d.status = DriverStatus.DELIVERING
        d.install(d.delivery_route)
        d.delivery_route = None
        left = d.itinerary.consume(left)
        d.node = d.itinerary.node
        if not d.itinerary.complete:
            return events
        t = now + dt - left
        status = DriverStatus.DELIVERING
    if status == DriverStatus.DELIVERING:
        events.append(("dropoff", t))
        d.serving_order = None
    else:
        events.append(("arrive", t))
        d.cruise_grid = None
    d.status = DriverStatus.IDLE
    d.itinerary = None
    d.idle_time = left
    return events


def passenger_reaction(o: Order, assignment, tick: float, rng):
    """React to this tick's matching outcome.

    `assignment` is None or (driver_id, pickup_distance).  Returns the order's
    new status.  Unassigned orders age by one tick, or cancel once the next
    tick would reach their max wait.
    """
    if o.status != OrderStatus.UNMATCHED:
        raise InvalidTransition(f"order {o.order_id} is not waiting ({o.status.name})")
    if assignment is not None:
        driver_id, distance = assignment
        p = o.cancel_curve(distance)
        if p > 0 and (p >= 1 or rng.random() < p):
            o.move(OrderStatus.CANCELLED)
            return o.status
        o.move(OrderStatus.MATCHED_WAITING_PICKUP)
        o.driver_id = driver_id
        o.pickup_distance = distance
        return o.status
    if o.current_wait + tick >= o.max_wait:
        o.move(OrderStatus.CANCELLED)
    else:
        o.current_wait += tick
    return o.status


def driver_reaction(d: Driver, order: Optional[Order], rng, *, pickup_route=None, delivery_route=None,
                    cancel_curve: CancelCurve = NEVER_CANCEL, cruise_enabled=True, now=0.0):
    """React to this tick's matching outcome; returns True if an assignment was accepted.

    A rejected assignment sends the order back to the waiting pool.  An
    unassigned idle driver whose idle time reached the limit switches to
    cruising (the destination is picked by the platform side).
    """
    if order is None:
        if d.status == DriverStatus.IDLE and cruise_enabled and d.idle_time >= d.max_idle_time \
                and not d.leaving(now):
            d.status = DriverStatus.CRUISING
        return False
    distance = pickup_route.total_length
    p = cancel_curve(distance)
    if p > 0 and (p >= 1 or rng.random() < p):
        order.move(OrderStatus.UNMATCHED)
        order.driver_id = None
        order.pickup_distance = None
        return False
    d.status = DriverStatus.PICKING_UP
    d.serving_order = order.order_id
    d.install(pickup_route)
    d.delivery_route = delivery_route
    d.cruise_grid = None
    d.idle_time = 0.0
    return True


def apply_offline_schedule(d: Driver, now: float):
    """Take the driver offline if its time is up and it is not serving anyone."""
    if d.status in IN_SERVICE or d.status == DriverStatus.OFFLINE:
        return False
    if now >= d.offline_time:
        d.status = DriverStatus.OFFLINE
        d.itinerary = None
        d.cruise_grid = None
        return True
    return False


@dataclass
class AgentTally:
    produced: int = 0
    matched: int = 0
    finished: int = 0
    cancelled: int = 0
    by_status: dict = field(default_factory=dict)


def tally(orders):
    """Count orders by current status (the conservation check)."""
    t = AgentTally()
    for o in orders:
        t.produced += 1
        t.by_status[o.status] = t.by_status.get(o.status, 0) + 1
    t.finished = t.by_status.get(OrderStatus.FINISHED, 0)
    t.cancelled = t.by_status.get(OrderStatus.CANCELLED, 0)
    t.matched = t.by_status.get(OrderStatus.MATCHED_WAITING_PICKUP, 0) + t.by_status.get(OrderStatus.IN_DELIVERY, 0)
    return t
