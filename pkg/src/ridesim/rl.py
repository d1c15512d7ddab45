"""MDP views of the simulator and the tabular learners built on them.

Two decision problems are exposed.  In the matching problem every driver in
a matching pool is an agent at state (grid, interval); being assigned an
order earns its fare and moves the agent to wherever it next re-enters a
pool.  In the repositioning problem each cruise decision picks one of the
nine neighbor moves.  A third, pricing, only has environment hooks.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .engine import Simulation, SimulationConfig, SimulationObserver
from .market import RepositionMode, RepositionPolicy, fare_value, pickup_distance_value
from .network import GridOverlay, RouteCache

log = logging.getLogger(__name__)

N_ACTIONS = 9
STAY = 4


class MdpState(NamedTuple):
    grid: int
    t: int  # matching-interval index within the episode


class Transition(NamedTuple):
    state: MdpState
    action: Optional[int]
    reward: float
    next_state: MdpState
    done: bool
    driver_id: int = -1


class DivergenceError(RuntimeError):
    pass


@dataclass
class LearnerConfig:
    gamma: float = 0.9
    lr_value: float = 0.005
    lr_actor: float = 0.001
    lr_critic: float = 0.001
    episodes: int = 10
    temperature: float = 1.0  # softmax temperature of the repositioning actor
    bound: float = 1e6  # any |value| above this aborts training
    collect: str = "current"  # matching data from the "current" table policy or from "myopic" dispatch

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        for name in ("lr_value", "lr_actor", "lr_critic", "temperature", "bound"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")
        if self.collect not in ("current", "myopic"):
            raise ValueError(f"unknown collect mode {self.collect!r}")


def _discount(gamma, s, s_next, done):
    if done:
        return 0.0
    return gamma ** max(0, s_next.t - s.t)


class ValueTable:
    """State values V(grid, t); the horizon column is terminal and stays 0."""

    def __init__(self, n_grids, horizon):
        self.n_grids = int(n_grids)
        self.horizon = int(horizon)
        self.values = np.zeros((self.n_grids, self.horizon + 1))
        self.counts = np.zeros((self.n_grids, self.horizon + 1), dtype=np.int64)

    def __call__(self, grid, t):
        if t >= self.horizon:
            return 0.0
        return self.values[grid, t]

    def copy(self):
        out = ValueTable(self.n_grids, self.horizon)
        out.values = self.values.copy()
        out.counts = self.counts.copy()
        return out

    def check(self, bound):
        worst = np.abs(self.values).max() if self.values.size else 0.0
        if not np.isfinite(worst) or worst > bound:
            g, t = np.unravel_index(np.argmax(np.nan_to_num(np.abs(self.values), nan=np.inf)), self.values.shape)
            raise DivergenceError(f"value table diverged: |V| = {worst!r} at grid {g}, t {t} (bound {bound})")


def td_error(vt: ValueTable, tr: Transition, gamma):
    s, s2 = tr.state, tr.next_state
    return tr.reward + _discount(gamma, s, s2, tr.done) * vt(*s2) - vt(*s)


def update_value_table(vt: ValueTable, batch, lr, gamma):
    """Apply V(s) += lr * (R + gamma^dt V(s') - V(s)) to the batch in order.

    dt is the number of intervals between s and s'; one-interval transitions
    give the usual one-step TD rule.
    """
    if not batch:
        raise ValueError("empty batch")
    for tr in batch:
        g, t = tr.state
        vt.values[g, t] += lr * td_error(vt, tr, gamma)
        vt.counts[g, t] += 1
    return vt


def trip_intervals(distance, speed, interval_length):
    return max(1, int(math.ceil(distance / speed / interval_length - 1e-9)))


def matching_value_fn(vt: ValueTable, order, driver, t, *, gamma, overlay, interval_length, pickup_distance=0.0):
    """Fare plus the discounted value of where the trip leaves the driver, minus where it is now."""
    delta = trip_intervals(pickup_distance + order.trip_distance, driver.speed, interval_length)
    dest = overlay.node_to_grid(order.destination)
    here = overlay.node_to_grid(driver.node)
    return order.fare + gamma ** delta * vt(dest, t + delta) - vt(here, t)


def make_matching_value_fn(vt, gamma, overlay, interval_length):
    def value(order, driver, pickup_distance, t):
        return matching_value_fn(vt, order, driver, t, gamma=gamma, overlay=overlay,
                                 interval_length=interval_length, pickup_distance=pickup_distance)

    return value


# actor-critic

def valid_action_mask(overlay):
    mask = np.zeros((overlay.n_grids, N_ACTIONS), dtype=bool)
    for g in range(overlay.n_grids):
        for a in overlay.neighbor_actions(g):
            mask[g, a] = True
    return mask


class ActorCriticTables:
    def __init__(self, mask, horizon):
        self.mask = np.asarray(mask, dtype=bool)
        self.n_grids = self.mask.shape[0]
        self.horizon = int(horizon)
        self.logits = np.zeros((self.n_grids, self.horizon, N_ACTIONS))
        self.critic = ValueTable(self.n_grids, self.horizon)

    @classmethod
    def for_overlay(cls, overlay, horizon):
        return cls(valid_action_mask(overlay), horizon)

    def policy(self, grid, t, temperature=1.0):
        t = min(t, self.horizon - 1)
        valid = self.mask[grid]
        z = np.where(valid, self.logits[grid, t] / temperature, -np.inf)
        z = z - z[valid].max()
        p = np.exp(z)
        return p / p.sum()

    def copy(self):
        out = ActorCriticTables(self.mask, self.horizon)
        out.logits = self.logits.copy()
        out.critic = self.critic.copy()
        return out

    def check(self, bound):
        self.critic.check(bound)
        worst = np.abs(self.logits).max() if self.logits.size else 0.0
        if not np.isfinite(worst) or worst > bound:
            raise DivergenceError(f"actor logits diverged: |logit| = {worst!r} (bound {bound})")


def a2c_update(tables: ActorCriticTables, batch, cfg: LearnerConfig):
    """One pass of advantage actor-critic over the batch.

    The advantage is the critic's TD error; the actor moves the taken
    action's logit by lr * adv * (1 - pi) and every other valid logit by
    -lr * adv * pi.
    """
    if not batch:
        raise ValueError("empty batch")
    for tr in batch:
        g, t = tr.state
        adv = td_error(tables.critic, tr, cfg.gamma)
        pi = tables.policy(g, t, cfg.temperature)
        step = cfg.lr_actor * adv
        row = tables.logits[g, t]
        valid = tables.mask[g]
        row[valid] -= step * pi[valid]
        row[tr.action] += step  # net effect on the taken action: step * (1 - pi)
        tables.critic.values[g, t] += cfg.lr_critic * adv
        tables.critic.counts[g, t] += 1
    return tables


# harvesting transitions from a running simulation

class MatchingHarvester(SimulationObserver):
    """Builds one transition per driver per matching pool it sits in.

    A transition stays open until the same driver reappears in a pool (its
    next state) or the episode ends (terminal at the horizon).
    """

    def __init__(self):
        self.open = {}  # driver_id -> [state, action, reward]
        self.done = []
        self._mark = None

    def on_matching(self, sim, t, drivers, problem, assignment):
        for d in drivers:
            s = MdpState(sim.grid_of(d.node), t)
            prev = self.open.pop(d.driver_id, None)
            if prev is not None:
                self.done.append(Transition(prev[0], prev[1], prev[2], s, False, d.driver_id))
            self.open[d.driver_id] = [s, None, 0.0]
        self._mark = len(sim.log)

    def on_tick_end(self, sim):
        if self._mark is None:
            return
        for ev in sim.log[self._mark:]:
            if ev.kind == "matched" and ev.driver_id in self.open:
                rec = self.open[ev.driver_id]
                rec[1] = ev.order_id
                rec[2] = float(ev.get("fare", 0.0))
        self._mark = None

    def finish(self, sim):
        h = sim.cfg.horizon
        for did in sorted(self.open):
            s, a, r = self.open[did]
            d = sim.state.drivers[did]
            self.done.append(Transition(s, a, r, MdpState(sim.grid_of(d.node), h), True, did))
        self.open = {}
        self.done.sort(key=lambda tr: (tr.state.t, tr.driver_id))
        return self.done


class RepositionHarvester(SimulationObserver):
    """One transition per cruise decision; rewards are filled in from the log afterwards."""

    def __init__(self):
        self.open = {}
        self.pending = []  # (driver_id, state, action, target grid)
        self.links = []

    def on_reposition(self, sim, driver, from_grid, to_grid, t):
        action = next(a for a, g in sim.overlay.neighbor_actions(from_grid).items() if g == to_grid) \
            if to_grid != from_grid else STAY
        self.pending.append((driver.driver_id, MdpState(from_grid, t), action, to_grid))

    def finish(self, sim):
        h = sim.cfg.horizon
        table = matched_fares_by_grid(sim.log)
        by_driver = {}
        for did, s, a, target in self.pending:
            by_driver.setdefault(did, []).append((s, a, target))
        out = []
        for did in sorted(by_driver):
            seq = by_driver[did]
            for k, (s, a, target) in enumerate(seq):
                r = _mean(table.get((target, s.t + 1), ()))
                if k + 1 < len(seq):
                    out.append(Transition(s, a, r, seq[k + 1][0], False, did))
                else:
                    d = sim.state.drivers[did]
                    out.append(Transition(s, a, r, MdpState(sim.grid_of(d.node), h), True, did))
        out.sort(key=lambda tr: (tr.state.t, tr.driver_id))
        return out


def _mean(xs):
    return sum(xs) / len(xs) if xs else 0.0


def matched_fares_by_grid(events):
    """(driver grid at match, interval) -> list of matched fares."""
    out = {}
    for ev in events:
        if ev.kind == "matched":
            out.setdefault((ev.get("grid"), ev.get("interval")), []).append(float(ev.get("fare", 0.0)))
    return out


def reposition_reward(events, grid, arrival_interval):
    """Average fare of the orders matched to drivers in `grid` during `arrival_interval` (0 if none)."""
    return _mean(matched_fares_by_grid(events).get((grid, arrival_interval), ()))


# policies

@dataclass
class Myopic:
    task = "matching"

    def configure(self, cfg, overlay):
        return dict(value_fn=fare_value)


@dataclass
class PDB:
    """Least total pickup distance among maximum-cardinality matchings."""

    task = "matching"

    def configure(self, cfg, overlay):
        return dict(value_fn=pickup_distance_value(cfg.radius, cfg.fleet_size))


@dataclass
class RandomReposition:
    task = "repositioning"

    def configure(self, cfg, overlay):
        return dict(reposition=RepositionPolicy(RepositionMode.RANDOM_NEIGHBOR))


@dataclass
class ValueTableMatching:
    table: ValueTable
    gamma: float = 0.9
    task = "matching"

    def configure(self, cfg, overlay):
        return dict(value_fn=make_matching_value_fn(self.table, self.gamma, overlay, cfg.interval_length))


@dataclass
class A2CReposition:
    tables: ActorCriticTables
    temperature: float = 1.0
    greedy: bool = False
    task = "repositioning"

    def configure(self, cfg, overlay):
        tables, temp, greedy = self.tables, self.temperature, self.greedy

        def decide(grid, t, actions, rng):
            p = tables.policy(grid, t, temp)
            a = int(np.argmax(p)) if greedy else int(rng.choice(N_ACTIONS, p=p))
            return actions.get(a, grid)

        return dict(reposition=RepositionPolicy(RepositionMode.INSTRUCTED, decide))


def _overlay_for(scenario):
    if scenario.overlay is None:
        scenario.overlay = GridOverlay(scenario.network, scenario.cfg.grid_rows, scenario.cfg.grid_cols)
    return scenario.overlay


@dataclass
class Scenario:
    cfg: SimulationConfig
    network: object
    pool: object
    cache: object = None
    overlay: object = None


def rollout(policy, scenario: Scenario, seed=None, observers=()):
    """Like run_episode but also hands back the finished Simulation."""
    cfg = scenario.cfg if seed is None else scenario.cfg.replace(seed=seed)
    overlay = _overlay_for(scenario)
    if scenario.cache is None:
        scenario.cache = RouteCache(scenario.network)
    kw = policy.configure(cfg, overlay)
    harvester = MatchingHarvester() if policy.task == "matching" else RepositionHarvester()
    sim = Simulation(cfg, scenario.network, scenario.pool, cache=scenario.cache, overlay=overlay,
                     value_fn=kw.get("value_fn"), reposition=kw.get("reposition"),
                     observers=[harvester, *observers])
    report = sim.run()
    return report, harvester.finish(sim), sim


def run_episode(policy, scenario: Scenario, seed=None):
    """Simulate one episode under `policy`; returns (report, transitions) for the policy's task."""
    report, transitions, _ = rollout(policy, scenario, seed)
    return report, transitions


@dataclass
class CurvePoint:
    episode: int
    revenue: float
    frao: float
    occupancy: float


@dataclass
class TrainResult:
    tables: object
    curve: list = field(default_factory=list)


def train(task, scenarios, learner: LearnerConfig = LearnerConfig(), episodes=None, tables=None):
    """Alternate rollouts and table updates; episode k uses scenario k mod len and seed cfg.seed + k."""
    if not scenarios:
        raise ValueError("need at least one training scenario")
    episodes = learner.episodes if episodes is None else episodes
    first = scenarios[0]
    overlay = _overlay_for(first)
    horizon = first.cfg.horizon
    if task == "matching":
        tables = tables if tables is not None else ValueTable(overlay.n_grids, horizon)
    elif task == "repositioning":
        tables = tables if tables is not None else ActorCriticTables.for_overlay(overlay, horizon)
    else:
        raise ValueError(f"unknown task {task!r}")
    curve = []
    for k in range(episodes):
        sc = scenarios[k % len(scenarios)]
        _overlay_for(sc)
        seed = sc.cfg.seed + k
        if task == "matching":
            pol = Myopic() if learner.collect == "myopic" else ValueTableMatching(tables, learner.gamma)
            report, batch = run_episode(pol, sc, seed=seed)
            if batch:
                update_value_table(tables, batch, learner.lr_value, learner.gamma)
        else:
            report, batch = run_episode(A2CReposition(tables, learner.temperature), sc, seed=seed)
            if batch:
                a2c_update(tables, batch, learner)
        try:
            tables.check(learner.bound)
        except DivergenceError as exc:
            raise DivergenceError(f"episode {k}: {exc}") from None
        curve.append(CurvePoint(k, report.platform_revenue, report.frao, report.occupancy_rate))
        log.info("episode %d revenue %.2f frao %.3f", k, report.platform_revenue, report.frao)
    return TrainResult(tables, curve)


# pricing hooks

class PricingState(NamedTuple):
    grid: int
    t: int


class GridPricingHook:
    """Adapter from a pricing decision rule to the engine's pricing hook.

    `decide(states, sim)` gets one PricingState per grid at each matching
    interval and returns {grid: per-km rate}.  The decisions are kept so the
    (state, action, reward) triples can be read back after the run.
    """

    def __init__(self, decide):
        self.decide = decide
        self.actions = {}

    def __call__(self, sim):
        t = sim.time_index
        states = [PricingState(g, t) for g in range(sim.overlay.n_grids)]
        rates = dict(self.decide(states, sim))
        for g, r in rates.items():
            if r < 0:
                raise ValueError(f"negative rate {r} for grid {g}")
            self.actions[PricingState(g, t)] = r
        return rates

    def transitions(self, events, horizon, interval_length, start_time=0.0):
        """Reward of (g, t) = fares of finished orders requested in grid g during interval t."""
        origin = {}
        for ev in events:
            if ev.kind == "order":
                t = int((ev.time - start_time) // interval_length)
                origin[ev.order_id] = (ev.get("grid"), t)
        revenue = {}
        for ev in events:
            if ev.kind == "dropoff" and ev.order_id in origin:
                key = origin[ev.order_id]
                revenue[key] = revenue.get(key, 0.0) + float(ev.get("fare", 0.0))
        out = []
        for s in sorted(self.actions):
            nxt = PricingState(s.grid, s.t + 1)
            out.append(Transition(MdpState(*s), self.actions[s], revenue.get((s.grid, s.t), 0.0),
                                  MdpState(*nxt), nxt.t >= horizon))
        return out


# serialization

TABLE_MAGIC = "# ridesim-table v1"


def write_value_table(vt: ValueTable, path):
    with open(path, "w", newline="") as fh:
        fh.write(f"{TABLE_MAGIC} kind=value grids={vt.n_grids} horizon={vt.horizon}\n")
        w = csv.writer(fh)
        w.writerow(["grid", "time_index", "value"])
        for g in range(vt.n_grids):
            for t in range(vt.horizon):
                w.writerow([g, t, repr(float(vt.values[g, t]))])


def write_actor_critic(tables: ActorCriticTables, path):
    with open(path, "w", newline="") as fh:
        fh.write(f"{TABLE_MAGIC} kind=actor_critic grids={tables.n_grids} horizon={tables.horizon}\n")
        w = csv.writer(fh)
        w.writerow(["grid", "time_index", "action", "value"])
        for g in range(tables.n_grids):
            for t in range(tables.horizon):
                w.writerow([g, t, "", repr(float(tables.critic.values[g, t]))])
                for a in np.flatnonzero(tables.mask[g]).tolist():
                    w.writerow([g, t, a, repr(float(tables.logits[g, t, a]))])


def read_table(path, overlay=None):
    """Load a table written by write_value_table or write_actor_critic."""
    with open(path, newline="") as fh:
        first = fh.readline().rstrip("\n")
        if not first.startswith(TABLE_MAGIC + " "):
            raise ValueError(f"{path}: not a ridesim table file (or unsupported version)")
        meta = dict(item.split("=", 1) for item in first[len(TABLE_MAGIC) + 1:].split())
        grids, horizon = int(meta["grids"]), int(meta["horizon"])
        rows = list(csv.reader(fh))
    header, rows = rows[0], rows[1:]
    if meta["kind"] == "value":
        vt = ValueTable(grids, horizon)
        for g, t, v in rows:
            vt.values[int(g), int(t)] = float(v)
        return vt
    if meta["kind"] != "actor_critic":
        raise ValueError(f"{path}: unknown table kind {meta['kind']!r}")
    mask = np.zeros((grids, N_ACTIONS), dtype=bool)
    for g, t, a, v in rows:
        if a != "":
            mask[int(g), int(a)] = True
    if overlay is not None and not np.array_equal(mask, valid_action_mask(overlay)):
        raise ValueError(f"{path}: action layout does not match the grid overlay")
    tables = ActorCriticTables(mask, horizon)
    for g, t, a, v in rows:
        if a == "":
            tables.critic.values[int(g), int(t)] = float(v)
        else:
            tables.logits[int(g), int(t), int(a)] = float(v)
    return tables


CURVE_HEADER = ["episode", "revenue", "frao", "occupancy"]


def write_learning_curve(curve, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_HEADER)
        for p in curve:
            w.writerow([p.episode, repr(float(p.revenue)), repr(float(p.frao)), repr(float(p.occupancy))])


def read_learning_curve(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader) != CURVE_HEADER:
            raise ValueError(f"{path}: bad learning-curve header")
        return [CurvePoint(int(e), float(r), float(f), float(o)) for e, r, f, o in reader]
