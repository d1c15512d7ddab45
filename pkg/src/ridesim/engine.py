"""Per-tick orchestration loop, event log and metrics."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Callable, NamedTuple, Optional

import numpy as np

from .agents import (
    AVAILABLE,
    BehaviorConfig,
    Driver,
    DriverStatus,
    OrderStatus,
    advance_driver,
    apply_offline_schedule,
    driver_reaction,
    passenger_reaction,
)
from .market import (
    OrderPool,
    PricingRule,
    RepositionMode,
    RepositionPolicy,
    build_matching_problem,
    choose_cruise_destination,
    demand_weights,
    fare_value,
    generate_orders,
    sample_node_in_grid,
    solve_assignment,
)
from .network import GridOverlay, NoRouteError, RouteCache, haversine_m

log = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    def __init__(self, tick, phase, cause):
        self.tick = tick
        self.phase = phase
        super().__init__(f"tick {tick}, phase {phase}: {cause!r}")


@dataclass
class SimulationConfig:
    tick_length: float = 5.0
    matching_interval: int = 1  # in ticks
    start_time: float = 0.0
    end_time: float = 3600.0
    fleet_size: int = 100
    placement: str = "pool"  # "pool" origins, "uniform" over nodes, or "explicit"
    placement_nodes: tuple = ()
    speed: float = 6.33
    radius: float = 2000.0
    pickup_metric: str = "network"  # or "straight"
    seed: int = 0
    sample_fraction: float = 1.0
    grid_rows: int = 4
    grid_cols: int = 4
    reposition: str = "demand"
    behavior: BehaviorConfig = field(default_factory=BehaviorConfig)
    pricing: PricingRule = field(default_factory=PricingRule)

    def __post_init__(self):
        if not self.end_time > self.start_time:
            raise ValueError("end_time must be greater than start_time")
        if not self.tick_length > 0:
            raise ValueError("tick_length must be > 0")
        if self.matching_interval < 1:
            raise ValueError("matching_interval must be >= 1")
        if self.fleet_size < 0:
            raise ValueError("fleet_size must be >= 0")
        if self.speed <= 0 or self.radius <= 0:
            raise ValueError("speed and radius must be > 0")
        if self.pickup_metric not in ("network", "straight"):
            raise ValueError(f"unknown pickup_metric {self.pickup_metric!r}")
        if self.placement not in ("pool", "uniform", "explicit"):
            raise ValueError(f"unknown placement {self.placement!r}")
        RepositionMode(self.reposition)

    @property
    def n_ticks(self):
        return int(math.ceil((self.end_time - self.start_time) / self.tick_length - 1e-9))

    @property
    def interval_length(self):
        return self.tick_length * self.matching_interval

    @property
    def horizon(self):
        """Number of matching intervals in the run."""
        return int(math.ceil(self.n_ticks / self.matching_interval))

    def replace(self, **changes):
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return SimulationConfig(**values)


class Event(NamedTuple):
    tick: int  # timestamp = start_time + tick * tick_length
    time: float  # exact time inside the tick
    kind: str
    order_id: Optional[int] = None
    driver_id: Optional[int] = None
    detail: tuple = ()  # (key, value) pairs

    def get(self, key, default=None):
        for k, v in self.detail:
            if k == key:
                return v
        return default


class EventLog(list):
    """Append-only list of Events plus the run's time frame."""

    def __init__(self, start_time=0.0, end_time=0.0, tick_length=1.0, n_drivers=0):
        super().__init__()
        self.start_time = start_time
        self.end_time = end_time
        self.tick_length = tick_length
        self.n_drivers = n_drivers

    def timestamp(self, ev):
        return self.start_time + ev.tick * self.tick_length


EVENT_HEADER = ["tick", "event_type", "order_id", "driver_id", "detail"]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_event_log(events: EventLog, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["#", f"start_time={events.start_time!r}", f"end_time={events.end_time!r}",
                    f"tick_length={events.tick_length!r}", f"n_drivers={events.n_drivers}"])
        w.writerow(EVENT_HEADER)
        for ev in events:
            detail = ";".join([f"time={ev.time!r}"] + [f"{k}={_fmt(v)}" for k, v in ev.detail])
            w.writerow([ev.tick, ev.kind, "" if ev.order_id is None else ev.order_id,
                        "" if ev.driver_id is None else ev.driver_id, detail])


def _parse_value(s):
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def read_event_log(path) -> EventLog:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        meta = dict(item.split("=", 1) for item in next(reader)[1:])
        if next(reader) != EVENT_HEADER:
            raise ValueError(f"{path}: bad event log header")
        events = EventLog(float(meta["start_time"]), float(meta["end_time"]),
                          float(meta["tick_length"]), int(meta["n_drivers"]))
        for row in reader:
            tick, kind, oid, did, detail = row
            pairs = [p.split("=", 1) for p in detail.split(";")] if detail else []
            t = float(pairs[0][1])
            rest = tuple((k, _parse_value(v)) for k, v in pairs[1:])
            events.append(Event(int(tick), t, kind, int(oid) if oid else None, int(did) if did else None, rest))
    return events


class SimulationObserver:
    """Hooks for harvesting decisions (RL transitions etc.); all no-ops here."""

    def on_matching(self, sim, time_index, drivers, problem, assignment):
        pass

    def on_reposition(self, sim, driver, from_grid, to_grid, time_index):
        pass

    def on_tick_end(self, sim):
        pass


@dataclass
class SimulationState:
    clock: float
    tick_index: int
    orders: dict
    waiting: list
    drivers: list
    log: EventLog


class Simulation:
    """One simulated market over a road network.

    Each `step` runs, in order: (1) matching when the tick is on the matching
    cadence, (2) passenger then driver reactions, (3) order generation and
    pricing, (4) cruise/reposition destinations, (5) offline schedule, (6)
    movement of every driver.  Orders generated in a tick first become
    matchable on the next one.
    """

    def __init__(self, cfg: SimulationConfig, network, pool: OrderPool, *, cache: Optional[RouteCache] = None,
                 overlay: Optional[GridOverlay] = None, value_fn: Optional[Callable] = None,
                 reposition: Optional[RepositionPolicy] = None, pricing_policy: Optional[Callable] = None,
                 observers=()):
        self.cfg = cfg
        self.net = network
        self.pool = pool
        self.cache = cache if cache is not None else RouteCache(network)
        self.overlay = overlay if overlay is not None else GridOverlay(network, cfg.grid_rows, cfg.grid_cols)
        self.value_fn = value_fn or fare_value
        self.reposition = reposition or RepositionPolicy(RepositionMode(cfg.reposition))
        self.pricing_policy = pricing_policy
        self.grid_rates = None
        self.observers = list(observers)
        self.rng = np.random.default_rng(cfg.seed)
        self.weights = demand_weights(pool, self.overlay)
        self.revenue_this_interval = 0.0

        events = EventLog(cfg.start_time, cfg.end_time, cfg.tick_length, cfg.fleet_size)
        drivers = [self._make_driver(k) for k in range(cfg.fleet_size)]
        for d in drivers:
            events.append(Event(0, cfg.start_time, "online", None, d.driver_id,
                                (("grid", self.overlay.node_to_grid(d.node)),)))
        self.state = SimulationState(cfg.start_time, 0, {}, [], drivers, events)

    def _make_driver(self, k):
        cfg = self.cfg
        if cfg.placement == "explicit":
            node = int(cfg.placement_nodes[k % len(cfg.placement_nodes)])
        elif cfg.placement == "pool" and len(self.pool):
            node = int(self.pool.origin[int(self.rng.integers(len(self.pool)))])
        else:
            node = int(self.net.node_ids[int(self.rng.integers(self.net.n_nodes))])
        return Driver(k, node, cfg.speed, max_idle_time=cfg.behavior.max_idle_time,
                      offline_time=cfg.behavior.sample_offline_time(cfg.start_time, self.rng))

    # helpers

    @property
    def log(self):
        return self.state.log

    @property
    def done(self):
        return self.state.tick_index >= self.cfg.n_ticks

    @property
    def time_index(self):
        return self.state.tick_index // self.cfg.matching_interval

    def grid_of(self, node):
        return self.overlay.node_to_grid(node)

    def pickup_distances(self, driver_nodes, order_nodes, limit):
        if self.cfg.pickup_metric == "straight":
            ix = [self.net.index[int(n)] for n in driver_nodes]
            jx = [self.net.index[int(n)] for n in order_nodes]
            lon, lat = self.net.lon, self.net.lat
            d = haversine_m(lon[ix][:, None], lat[ix][:, None], lon[jx][None, :], lat[jx][None, :])
            return np.where(d <= limit, d, np.inf)
        return self.cache.distance_matrix(driver_nodes, order_nodes, limit)

    def trip_distance(self, o, d):
        return self.cache.distance(o, d)

    def _emit(self, tick, time, kind, order_id=None, driver_id=None, **detail):
        self.state.log.append(Event(tick, time, kind, order_id, driver_id, tuple(detail.items())))

    # phases

    def step(self):
        s = self.state
        if self.done:
            raise RuntimeError("simulation already finished")
        phase = "matching"
        try:
            assigned = self._phase_matching()
            phase = "reactions"
            self._phase_reactions(assigned)
            phase = "generation"
            self._phase_generation()
            phase = "reposition"
            self._phase_reposition()
            phase = "offline"
            self._phase_offline()
            phase = "movement"
            self._phase_movement()
            for ob in self.observers:
                ob.on_tick_end(self)
        except SimulationError:
            raise
        except Exception as exc:
            raise SimulationError(s.tick_index, phase, exc) from exc
        s.tick_index += 1
        s.clock = self.cfg.start_time + s.tick_index * self.cfg.tick_length
        return s

    def _phase_matching(self):
        s, cfg = self.state, self.cfg
        if s.tick_index % cfg.matching_interval:
            return {}
        if self.pricing_policy is not None:
            self.grid_rates = self.pricing_policy(self)
        self.revenue_this_interval = 0.0
        now = s.clock
        pool_drivers = [d for d in s.drivers if d.status in AVAILABLE and not d.leaving(now)]
        waiting = [o for o in s.waiting if o.status == OrderStatus.UNMATCHED]
        t = self.time_index
        problem = build_matching_problem(waiting, pool_drivers, cfg.radius, self.value_fn,
                                         distances=self.pickup_distances, t=t)
        assignment = solve_assignment(problem)
        for ob in self.observers:
            ob.on_matching(self, t, pool_drivers, problem, assignment)
        if not assignment.pairs:
            return {}
        by_id = {d.driver_id: d for d in pool_drivers}
        row = {oid: i for i, oid in enumerate(problem.order_ids.tolist())}
        col = {did: j for j, did in enumerate(problem.driver_ids.tolist())}
        return {oid: (by_id[did], float(problem.pickup_distance[row[oid], col[did]]))
                for oid, did in assignment.pairs}

    def _phase_reactions(self, assigned):
        s, cfg = self.state, self.cfg
        now, k, tick = s.clock, s.tick_index, cfg.tick_length
        accepted = set()
        still_waiting = []
        for o in s.waiting:
            if o.status != OrderStatus.UNMATCHED:
                continue
            a = assigned.get(o.order_id)
            if a is None:
                if passenger_reaction(o, None, tick, self.rng) == OrderStatus.CANCELLED:
                    o.end_time = now
                    self._emit(k, now, "cancel_timeout", o.order_id)
                else:
                    still_waiting.append(o)
                continue
            d, distance = a
            pickup = self.cache.route(d.node, o.origin)
            if passenger_reaction(o, (d.driver_id, pickup.total_length), tick, self.rng) == OrderStatus.CANCELLED:
                o.end_time = now
                self._emit(k, now, "cancel_after_match", o.order_id, d.driver_id, distance=pickup.total_length)
                continue
            delivery = self.cache.route(o.origin, o.destination)
            ok = driver_reaction(d, o, self.rng, pickup_route=pickup, delivery_route=delivery,
                                 cancel_curve=cfg.behavior.driver_cancel, now=now)
            if ok:
                accepted.add(d.driver_id)
                o.match_time = now
                self._emit(k, now, "matched", o.order_id, d.driver_id, grid=self.grid_of(d.node),
                           fare=o.fare, distance=pickup.total_length, interval=self.time_index)
            else:
                self._emit(k, now, "driver_reject", o.order_id, d.driver_id)
                still_waiting.append(o)
        s.waiting = still_waiting
        cruise_enabled = self.reposition.mode != RepositionMode.NONE
        for d in s.drivers:
            if d.status == DriverStatus.IDLE and d.driver_id not in accepted:
                driver_reaction(d, None, self.rng, cruise_enabled=cruise_enabled, now=now)

    def _phase_generation(self):
        s, cfg = self.state, self.cfg
        rate_for = None
        if self.grid_rates is not None:
            rates = self.grid_rates
            rate_for = lambda node: rates.get(self.grid_of(node), cfg.pricing.per_km_rate)  # noqa: E731
        new = generate_orders(self.pool, s.clock, s.clock + cfg.tick_length, cfg.sample_fraction, self.rng,
                              trip_distance=self.trip_distance, pricing=cfg.pricing, behavior=cfg.behavior,
                              first_id=len(s.orders), rate_for=rate_for)
        for o in new:
            s.orders[o.order_id] = o
            s.waiting.append(o)
            self._emit(s.tick_index, o.request_time, "order", o.order_id, None, fare=o.fare,
                       grid=self.grid_of(o.origin))

    def _phase_reposition(self):
        s = self.state
        t = self.time_index
        hour = int((s.clock // 3600) % self.weights.shape[0])
        for d in s.drivers:
            if d.status != DriverStatus.CRUISING or d.itinerary is not None:
                continue
            g = self.grid_of(d.node)
            target = choose_cruise_destination(g, self.overlay, self.reposition, self.weights[hour], self.rng, t)
            if not self.overlay.nodes_in(target):
                target = g
            dest = sample_node_in_grid(self.overlay, target, self.rng, d.node)
            try:
                route = self.cache.route(d.node, dest)
            except NoRouteError:
                route = self.cache.route(d.node, d.node)
            d.install(route)
            d.cruise_grid = target
            self._emit(s.tick_index, s.clock, "cruise_start", None, d.driver_id, grid=g, target=target, interval=t)
            for ob in self.observers:
                ob.on_reposition(self, d, g, target, t)

    def _phase_offline(self):
        s = self.state
        for d in s.drivers:
            if apply_offline_schedule(d, s.clock):
                self._emit(s.tick_index, s.clock, "offline", None, d.driver_id)

    def _phase_movement(self):
        s, cfg = self.state, self.cfg
        k = s.tick_index + 1
        for d in s.drivers:
            serving = d.serving_order
            for kind, t in advance_driver(d, cfg.tick_length, s.clock):
                if kind == "pickup":
                    o = s.orders[serving]
                    o.move(OrderStatus.IN_DELIVERY)
                    o.pickup_time = t
                    self._emit(k, t, "pickup", o.order_id, d.driver_id)
                elif kind == "dropoff":
                    o = s.orders[serving]
                    o.move(OrderStatus.FINISHED)
                    o.end_time = t
                    self.revenue_this_interval += o.fare
                    self._emit(k, t, "dropoff", o.order_id, d.driver_id, fare=o.fare, grid=self.grid_of(d.node))
                else:
                    self._emit(k, t, "cruise_end", None, d.driver_id, grid=self.grid_of(d.node))

    def run(self):
        while not self.done:
            self.step()
        return compute_metrics(self.log)


def run(cfg: SimulationConfig, network, pool: OrderPool, **kwargs):
    """Simulate until end_time and return (MetricsReport, Simulation)."""
    sim = Simulation(cfg, network, pool, **kwargs)
    report = sim.run()
    return report, sim


# metrics

_DRIVER_STATE = {
    "online": DriverStatus.IDLE,
    "matched": DriverStatus.PICKING_UP,
    "pickup": DriverStatus.DELIVERING,
    "dropoff": DriverStatus.IDLE,
    "cruise_start": DriverStatus.CRUISING,
    "cruise_end": DriverStatus.IDLE,
    "offline": DriverStatus.OFFLINE,
}

_CANCEL_KINDS = ("cancel_timeout", "cancel_after_match")


@dataclass
class MetricsReport:
    matching_rate: float = 0.0
    avg_matching_time: float = 0.0
    avg_pickup_time: float = 0.0
    avg_total_wait: float = 0.0
    platform_revenue: float = 0.0
    frao: float = 0.0
    occupancy_rate: float = 0.0
    utilization_rate: float = 0.0
    produced: int = 0
    matched: int = 0
    finished: int = 0
    cancelled: int = 0
    active: int = 0
    avg_pickup_distance: float = 0.0
    avg_idle_vehicles: float = 0.0
    avg_waiting_orders: float = 0.0
    empty: bool = False
    series: dict = field(default_factory=dict, repr=False, compare=False)

    SCALARS = ("matching_rate", "avg_matching_time", "avg_pickup_time", "avg_total_wait", "platform_revenue",
               "frao", "occupancy_rate", "utilization_rate", "produced", "matched", "finished", "cancelled",
               "active", "avg_pickup_distance", "avg_idle_vehicles", "avg_waiting_orders", "empty")

    def as_dict(self):
        return {k: getattr(self, k) for k in self.SCALARS}


def driver_intervals(events: EventLog, end_time=None):
    """Per-driver list of (status, t_start, t_end) reconstructed from the log."""
    end_time = events.end_time if end_time is None else end_time
    current = {}
    out = {}
    for ev in events:
        new = _DRIVER_STATE.get(ev.kind)
        if new is None or ev.driver_id is None:
            continue
        did = ev.driver_id
        if did in current:
            status, t0 = current[did]
            out.setdefault(did, []).append((status, t0, ev.time))
        current[did] = (new, ev.time)
    for did, (status, t0) in current.items():
        out.setdefault(did, []).append((status, t0, end_time))
    return out


def status_time(events: EventLog, since=None, until=None):
    """Total driver-seconds per status, clipped to [since, until]."""
    since = events.start_time if since is None else since
    until = events.end_time if until is None else until
    totals = {s: 0.0 for s in DriverStatus}
    for spans in driver_intervals(events, until).values():
        for status, t0, t1 in spans:
            a, b = max(t0, since), min(t1, until)
            if b > a:
                totals[status] += b - a
    return totals


def compute_metrics(events: EventLog, since: Optional[float] = None) -> MetricsReport:
    """Reduce an event log to the run's metrics.

    `since` restricts order statistics to requests at or after that time and
    driver time to the window after it (warm-up discard).
    """
    since = events.start_time if since is None else since
    if len(events) == 0:
        return MetricsReport(empty=True)

    request, match, pickup = {}, {}, {}
    finished, cancelled = set(), set()
    revenue = 0.0
    pickup_dist = []
    for ev in events:
        kind = ev.kind
        if kind == "order":
            request[ev.order_id] = ev.time
        elif kind == "matched":
            match.setdefault(ev.order_id, ev.time)
            pickup_dist.append((ev.order_id, ev.get("distance", 0.0)))
        elif kind == "pickup":
            pickup[ev.order_id] = ev.time
        elif kind == "dropoff":
            finished.add(ev.order_id)
        elif kind in _CANCEL_KINDS:
            cancelled.add(ev.order_id)
    population = {o for o, t in request.items() if t >= since}
    fares = {}
    for ev in events:
        if ev.kind == "dropoff" and ev.order_id in population:
            fares[ev.order_id] = ev.get("fare", 0.0)
    revenue = sum(fares[o] for o in sorted(fares))
    produced = len(population)
    matched = [o for o in sorted(population) if o in match]
    picked = [o for o in sorted(population) if o in pickup]
    n_fin = sum(1 for o in population if o in finished)
    n_can = sum(1 for o in population if o in cancelled)
    mt = float(np.mean([match[o] - request[o] for o in matched])) if matched else 0.0
    pt = float(np.mean([pickup[o] - match[o] for o in picked])) if picked else 0.0
    pds = [d for o, d in pickup_dist if o in population]
    times = status_time(events, since)
    online = sum(v for s, v in times.items() if s != DriverStatus.OFFLINE)
    delivering = times[DriverStatus.DELIVERING]
    busy = delivering + times[DriverStatus.PICKING_UP]
    series = _series(events)
    sel = series["time_s"] >= since
    report = MetricsReport(
        matching_rate=len(matched) / produced if produced else 0.0,
        avg_matching_time=mt,
        avg_pickup_time=pt,
        avg_total_wait=mt + pt,
        platform_revenue=float(revenue),
        frao=n_fin / produced if produced else 0.0,
        occupancy_rate=delivering / online if online > 0 else 0.0,
        utilization_rate=busy / online if online > 0 else 0.0,
        produced=produced,
        matched=len(matched),
        finished=n_fin,
        cancelled=n_can,
        active=produced - n_fin - n_can,
        avg_pickup_distance=float(np.mean(pds)) if pds else 0.0,
        avg_idle_vehicles=float(series["idle"][sel].mean()) if sel.any() else 0.0,
        avg_waiting_orders=float(series["waiting"][sel].mean()) if sel.any() else 0.0,
        empty=produced == 0 and online == 0,
        series=series,
    )
    if report.empty:
        log.warning("empty event log: metrics are all zero")
    return report


SERIES_COLUMNS = ("tick", "time_s", "produced", "matched", "finished", "cancelled", "revenue", "waiting",
                  "idle", "cruising", "picking_up", "delivering", "online", "matching_rate", "frao",
                  "occupancy", "utilization")


def _series(events: EventLog):
    """Cumulative order counts and a driver-status snapshot at every tick boundary."""
    n = int(round((events.end_time - events.start_time) / events.tick_length))
    z = lambda: np.zeros(n + 1)  # noqa: E731
    cols = {c: z() for c in SERIES_COLUMNS}
    cols["tick"] = np.arange(n + 1, dtype=float)
    cols["time_s"] = events.start_time + cols["tick"] * events.tick_length
    counts = {"produced": z(), "matched": z(), "finished": z(), "cancelled": z(), "revenue": z()}
    status_of = {}
    snap = np.zeros((n + 1, len(DriverStatus)))
    order_state = {}
    waiting = z()
    names = list(DriverStatus)
    pos = {s: i for i, s in enumerate(names)}
    live = np.zeros(len(DriverStatus))
    n_waiting = 0
    cur = 0
    seen_match = set()

    def flush(upto):
        nonlocal cur
        while cur < upto and cur <= n:
            snap[cur] = live
            waiting[cur] = n_waiting
            cur += 1

    for ev in events:
        tick = min(ev.tick, n)
        flush(tick)
        kind = ev.kind
        if kind == "order":
            counts["produced"][tick] += 1
            order_state[ev.order_id] = "waiting"
            n_waiting += 1
        elif kind == "matched":
            if ev.order_id not in seen_match:
                seen_match.add(ev.order_id)
                counts["matched"][tick] += 1
            if order_state.get(ev.order_id) == "waiting":
                n_waiting -= 1
            order_state[ev.order_id] = "matched"
        elif kind == "driver_reject":
            if order_state.get(ev.order_id) == "matched":
                n_waiting += 1
                order_state[ev.order_id] = "waiting"
        elif kind == "dropoff":
            counts["finished"][tick] += 1
            counts["revenue"][tick] += ev.get("fare", 0.0)
        elif kind in _CANCEL_KINDS:
            counts["cancelled"][tick] += 1
            if order_state.get(ev.order_id) == "waiting":
                n_waiting -= 1
            order_state[ev.order_id] = "cancelled"
        new = _DRIVER_STATE.get(kind)
        if new is not None and ev.driver_id is not None:
            old = status_of.get(ev.driver_id)
            if old is not None:
                live[pos[old]] -= 1
            live[pos[new]] += 1
            status_of[ev.driver_id] = new
    flush(n + 1)
    for c in counts:
        cols[c] = np.cumsum(counts[c])
    cols["waiting"] = waiting
    for s in names:
        key = s.value
        if key in cols:
            cols[key] = snap[:, pos[s]]
    online = snap.sum(axis=1) - snap[:, pos[DriverStatus.OFFLINE]]
    cols["online"] = online
    with np.errstate(divide="ignore", invalid="ignore"):
        cols["matching_rate"] = np.where(cols["produced"] > 0, cols["matched"] / np.maximum(cols["produced"], 1), 0.0)
        cols["frao"] = np.where(cols["produced"] > 0, cols["finished"] / np.maximum(cols["produced"], 1), 0.0)
        cols["occupancy"] = np.where(online > 0, cols["delivering"] / np.maximum(online, 1), 0.0)
        cols["utilization"] = np.where(online > 0, (cols["delivering"] + cols["picking_up"]) / np.maximum(online, 1), 0.0)
    return cols


def write_metrics(report: MetricsReport, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in report.as_dict().items():
            w.writerow([k, _fmt(v)])


def read_metrics(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        out = {}
        for k, v in reader:
            out[k] = v == "True" if v in ("True", "False") else _parse_value(v)
    return out


_INT_COLUMNS = {"tick", "produced", "matched", "finished", "cancelled", "waiting", "idle", "cruising",
                "picking_up", "delivering", "online"}


def write_series(report: MetricsReport, path):
    cols = report.series
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SERIES_COLUMNS)
        for i in range(len(cols["tick"])):
            w.writerow([int(cols[c][i]) if c in _INT_COLUMNS else repr(float(cols[c][i])) for c in SERIES_COLUMNS])


def read_series(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    arr = np.array(rows).reshape(-1, len(header))
    return {c: arr[:, k] for k, c in enumerate(header)}
