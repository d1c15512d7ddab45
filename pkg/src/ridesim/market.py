"""Platform-side operations: pricing, order generation, matching, cruising."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .agents import BehaviorConfig, Order


@dataclass(frozen=True)
class PricingRule:
    base_fare: float = 2.5
    included_distance: float = 0.0
    per_km_rate: float = 1.55

    def __post_init__(self):
        for name in ("base_fare", "included_distance", "per_km_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"pricing {name} must be >= 0")


def price_order(rule: PricingRule, trip_distance: float, per_km_rate: Optional[float] = None) -> float:
    """base + rate * billable km, where billable = distance beyond the included part."""
    if trip_distance < 0:
        raise ValueError("trip distance must be >= 0")
    rate = rule.per_km_rate if per_km_rate is None else per_km_rate
    return rule.base_fare + rate * max(0.0, trip_distance - rule.included_distance) / 1000.0


class OrderPool:
    """Historical requests sorted by request time (seconds)."""

    def __init__(self, request_time, origin, destination, fare=None):
        request_time = np.asarray(request_time, dtype=float)
        order = np.argsort(request_time, kind="stable")
        self.request_time = request_time[order]
        self.origin = np.asarray(origin, dtype=np.int64)[order]
        self.destination = np.asarray(destination, dtype=np.int64)[order]
        self.fare = None if fare is None else np.asarray(fare, dtype=float)[order]

    def __len__(self):
        return len(self.request_time)

    def window(self, start, end):
        """Row indices with start <= request_time < end."""
        lo = np.searchsorted(self.request_time, start, side="left")
        hi = np.searchsorted(self.request_time, end, side="left")
        return np.arange(lo, hi)

    @property
    def duration(self):
        if len(self) == 0:
            return 0.0
        return float(self.request_time[-1] - self.request_time[0])

    def rate(self, start=None, end=None):
        start = self.request_time[0] if start is None else start
        end = self.request_time[-1] if end is None else end
        n = len(self.window(start, end))
        return n / (end - start) if end > start else 0.0


POOL_HEADER = ["request_time_s", "origin_node", "destination_node"]


def load_order_pool(path) -> OrderPool:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [c.strip() for c in next(reader)]
        has_fare = header == POOL_HEADER + ["fare"]
        if header != POOL_HEADER and not has_fare:
            raise ValueError(f"{path}:1: expected header {','.join(POOL_HEADER)}[,fare]")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append((float(row[0]), int(row[1]), int(row[2]), float(row[3]) if has_fare else 0.0))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: bad order record ({exc})") from None
    arr = np.array(rows, dtype=float).reshape(-1, 4)
    return OrderPool(arr[:, 0], arr[:, 1].astype(np.int64), arr[:, 2].astype(np.int64),
                     arr[:, 3] if has_fare else None)


def write_order_pool(pool: OrderPool, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(POOL_HEADER + (["fare"] if pool.fare is not None else []))
        for k in range(len(pool)):
            row = [repr(float(pool.request_time[k])), int(pool.origin[k]), int(pool.destination[k])]
            if pool.fare is not None:
                row.append(repr(float(pool.fare[k])))
            w.writerow(row)


def generate_orders(pool: OrderPool, start: float, end: float, sample_fraction: float, rng, *,
                    trip_distance: Callable, pricing: PricingRule = PricingRule(),
                    behavior: BehaviorConfig = BehaviorConfig(), first_id: int = 0,
                    rate_for: Optional[Callable] = None):
    """Bootstrap this tick's orders from the pool.

    Every request in [start, end) is kept independently with probability
    `sample_fraction`.  Fares come from the pool's fare column if present,
    otherwise from the pricing rule on the network trip distance.  `rate_for`
    optionally maps an origin node to a per-km rate (area-wise pricing).
    """
    if not 0.0 <= sample_fraction <= 1.0:
        raise ValueError("sample_fraction must be in [0, 1]")
    rows = pool.window(start, end)
    if len(rows) == 0 or sample_fraction == 0.0:
        return []
    if sample_fraction < 1.0:
        rows = rows[rng.random(len(rows)) < sample_fraction]
    orders = []
    for k, r in enumerate(rows.tolist()):
        o, d = int(pool.origin[r]), int(pool.destination[r])
        dist = trip_distance(o, d)
        if not math.isfinite(dist):
            continue
        if pool.fare is not None:
            fare = float(pool.fare[r])
        else:
            fare = price_order(pricing, dist, None if rate_for is None else rate_for(o))
        orders.append(Order(
            order_id=first_id + len(orders),
            origin=o,
            destination=d,
            fare=fare,
            request_time=float(pool.request_time[r]),
            trip_distance=dist,
            max_wait=behavior.sample_max_wait(rng),
            cancel_curve=behavior.passenger_cancel,
        ))
    return orders


@dataclass
class MatchingProblem:
    order_ids: np.ndarray
    driver_ids: np.ndarray
    reward: np.ndarray  # -inf where infeasible
    feasible: np.ndarray
    pickup_distance: np.ndarray

    @property
    def shape(self):
        return (len(self.order_ids), len(self.driver_ids))

    @classmethod
    def empty(cls):
        z = np.zeros((0, 0))
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), z, z.astype(bool), z)


@dataclass
class Assignment:
    pairs: list  # (order_id, driver_id), sorted by order_id
    objective_value: float

    def __len__(self):
        return len(self.pairs)

    def as_dict(self):
        return dict(self.pairs)


def fare_value(order, driver, pickup_distance, t):
    return order.fare


def build_matching_problem(orders, drivers, radius: float, value_fn: Callable = fare_value, *,
                           distances: Callable, t: int = 0) -> MatchingProblem:
    """Assemble the reward matrix for waiting orders x available drivers.

    `distances(driver_nodes, order_nodes, limit)` returns pickup distances with
    shape (drivers, orders).  Pairs beyond `radius` are infeasible and carry
    -inf; `value_fn(order, driver, pickup_distance, t)` is only evaluated on
    feasible pairs.
    """
    if radius <= 0:
        raise ValueError("radius must be > 0")
    if not orders or not drivers:
        return MatchingProblem(
            np.array([o.order_id for o in orders], dtype=np.int64),
            np.array([d.driver_id for d in drivers], dtype=np.int64),
            np.full((len(orders), len(drivers)), -np.inf),
            np.zeros((len(orders), len(drivers)), dtype=bool),
            np.full((len(orders), len(drivers)), np.inf),
        )
    dist = np.asarray(distances([d.node for d in drivers], [o.origin for o in orders], radius)).T
    feasible = dist <= radius
    reward = np.full(dist.shape, -np.inf)
    for i, j in zip(*np.nonzero(feasible)):
        reward[i, j] = value_fn(orders[i], drivers[j], float(dist[i, j]), t)
    return MatchingProblem(
        np.array([o.order_id for o in orders], dtype=np.int64),
        np.array([d.driver_id for d in drivers], dtype=np.int64),
        reward, feasible, dist,
    )


def solve_assignment(p: MatchingProblem) -> Assignment:
    """Maximum-reward one-to-one assignment over feasible pairs.

    The matrix is padded to (n+m) square with zero-reward dummy rows and
    columns, so leaving an agent unmatched is always an option and a
    negative-reward pair is never forced.  Infeasible cells get a negative
    sentinel larger in magnitude than any achievable objective.
    """
    n, m = p.shape
    if n == 0 or m == 0 or not p.feasible.any():
        return Assignment([], 0.0)
    # only rows/cols with at least one feasible pair matter
    rows = np.flatnonzero(p.feasible.any(axis=1))
    cols = np.flatnonzero(p.feasible.any(axis=0))
    sub_f = p.feasible[np.ix_(rows, cols)]
    sub = np.where(sub_f, p.reward[np.ix_(rows, cols)], 0.0)
    if not np.isfinite(sub).all():
        raise ValueError("feasible pairs must have finite rewards")
    sentinel = -(np.abs(sub).sum() + 1.0) * (len(rows) + len(cols) + 1)
    k = len(rows) + len(cols)
    big = np.zeros((k, k))
    big[:len(rows), :len(cols)] = np.where(sub_f, sub, sentinel)
    r_idx, c_idx = linear_sum_assignment(big, maximize=True)
    pairs = []
    for r, c in zip(r_idx.tolist(), c_idx.tolist()):
        if r < len(rows) and c < len(cols):
            if not sub_f[r, c]:
                # zero-reward dummies always beat the sentinel; reaching here is a solver bug
                raise AssertionError("infeasible pair survived assignment")
            pairs.append((rows[r], cols[c]))
    pairs.sort()
    objective = 0.0
    for i, j in pairs:
        objective += p.reward[i, j]
    return Assignment([(int(p.order_ids[i]), int(p.driver_ids[j])) for i, j in pairs], float(objective))


def pickup_distance_value(radius, n_pairs_bound):
    """PDB reward: largest matching first, then least total pickup distance.

    Every match is worth a constant larger than the largest possible total
    pickup distance, so cardinality dominates and distance breaks ties.
    """
    offset = radius * (n_pairs_bound + 1)

    def value(order, driver, pickup_distance, t):
        return offset - pickup_distance

    return value


class RepositionMode(enum.Enum):
    NONE = "none"
    RANDOM_NEIGHBOR = "random"
    DEMAND_WEIGHTED = "demand"
    INSTRUCTED = "instructed"


@dataclass
class RepositionPolicy:
    mode: RepositionMode = RepositionMode.DEMAND_WEIGHTED
    # (grid, time_index, neighbor_actions: {action: grid}, rng) -> grid
    decide: Optional[Callable] = None

    def __post_init__(self):
        if isinstance(self.mode, str):
            self.mode = RepositionMode(self.mode)
        if self.mode == RepositionMode.INSTRUCTED and self.decide is None:
            raise ValueError("instructed repositioning needs a decision function")


def demand_weights(pool: OrderPool, overlay, hours=24):
    """Historical order counts per (hour of day, grid)."""
    w = np.zeros((hours, overlay.n_grids))
    if len(pool) == 0:
        return w
    hour = ((pool.request_time // 3600).astype(np.int64)) % hours
    grid = np.array([overlay.node_to_grid(o) for o in pool.origin.tolist()], dtype=np.int64)
    np.add.at(w, (hour, grid), 1.0)
    return w


def choose_cruise_destination(grid: int, overlay, policy: RepositionPolicy, weights, rng, time_index=0):
    """Pick the grid a cruising/repositioned driver heads to.

    `weights` is a per-grid array of nonnegative demand weights.  All-zero
    weights over the neighborhood fall back to uniform.
    """
    actions = overlay.neighbor_actions(grid)
    neighbors = sorted(actions.values())
    if len(neighbors) == 1 or policy.mode == RepositionMode.NONE:
        return grid
    if policy.mode == RepositionMode.RANDOM_NEIGHBOR:
        return neighbors[int(rng.integers(len(neighbors)))]
    if policy.mode == RepositionMode.DEMAND_WEIGHTED:
        w = np.asarray([weights[g] for g in neighbors], dtype=float)
        total = w.sum()
        if total <= 0:
            return neighbors[int(rng.integers(len(neighbors)))]
        return neighbors[int(rng.choice(len(neighbors), p=w / total))]
    g = policy.decide(grid, time_index, actions, rng)
    return g if g in actions.values() else grid


def sample_node_in_grid(overlay, grid, rng, fallback):
    nodes = overlay.nodes_in(grid)
    if not nodes:
        return fallback
    return nodes[int(rng.integers(len(nodes)))]
