"""Experiment configuration: a sectioned TOML file resolved into simulator inputs.

Unknown sections or keys are errors.  Relative paths are taken relative to the
config file.  A resolved config is a plain dict, so it can be hashed for the
run manifest.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .agents import BehaviorConfig, CancelCurve
from .engine import SimulationConfig
from .market import POOL_HEADER, OrderPool, PricingRule, load_order_pool
from .network import GridOverlay, RouteCache, load_network
from .rl import LearnerConfig, Scenario

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

INF = math.inf

DEFAULTS = {
    "simulation": {"start_time": 0.0, "end_time": 3600.0, "tick_length": 5.0, "seed": 0, "sample_fraction": 1.0},
    "network": {"nodes": None, "edges": None, "undirected": False, "cache": "lazy", "max_trees": None,
                "routes": None, "synthetic": None, "bench": None},
    "demand": {"orders": None, "rate": None, "seed": 0},
    "fleet": {"size": 100, "placement": "pool", "placement_nodes": [], "speed": 6.33},
    "behavior": {"max_wait": 300.0, "max_wait_high": None, "max_idle_time": 120.0, "offline_time": INF,
                 "offline_spread": 0.0, "passenger_cancel_threshold_m": INF, "passenger_cancel_probability": 0.0,
                 "driver_cancel_threshold_m": INF, "driver_cancel_probability": 0.0},
    "pricing": {"base_fare": 2.5, "included_distance": 0.0, "per_km_rate": 1.55},
    "matching": {"interval": 1, "radius": 2000.0, "pickup_metric": "network", "policy": "myopic", "table": None},
    "repositioning": {"mode": "demand", "grid_rows": 4, "grid_cols": 4, "policy": "default", "table": None,
                      "greedy": True},
    "rl": {"gamma": 0.9, "lr_value": 0.005, "lr_actor": 0.001, "lr_critic": 0.001, "episodes": 10,
           "temperature": 1.0, "bound": 1e6, "collect": "current", "train_seeds": [0, 1, 2, 3, 4],
           "test_seeds": [100, 101, 102, 103, 104]},
    "sweep": {"q": [], "n": [], "seeds": [0, 1, 2, 3, 4], "warmup": 0.2, "calibration_seeds": [1000, 1001],
              "queue": "mm1", "k": None, "batch_interval": None, "pickup_constant": None,
              "cd_A": None, "cd_alpha": None, "cd_beta": None},
}

SYNTHETIC_KEYS = {"rows", "cols", "spacing_m", "seed", "jitter", "drop_fraction", "one_way_fraction"}
SNAP_HEADER = ["request_time_s", "origin_lon", "origin_lat", "destination_lon", "destination_lat"]


class ConfigError(ValueError):
    pass


def _check_keys(raw):
    for section, body in raw.items():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key in body:
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
    syn = raw.get("network", {}).get("synthetic")
    if syn is not None:
        if not isinstance(syn, dict):
            raise ConfigError("[network] synthetic must be a table")
        bad = set(syn) - SYNTHETIC_KEYS
        if bad:
            raise ConfigError(f"unknown key {sorted(bad)[0]!r} in [network.synthetic]")


def merge(raw, base_dir=None):
    """Fill defaults and make paths absolute; returns the resolved dict."""
    _check_keys(raw)
    out = copy.deepcopy(DEFAULTS)
    for section, body in raw.items():
        out[section].update(body)
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    for section, key in (("network", "nodes"), ("network", "edges"), ("network", "routes"),
                         ("demand", "orders"), ("matching", "table"), ("repositioning", "table")):
        v = out[section][key]
        if v is not None:
            out[section][key] = str((base / v).resolve()) if not Path(v).is_absolute() else v
    return out


def config_hash(resolved):
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# building simulator objects

def _bench(resolved):
    name = resolved["network"]["bench"]
    if name is None:
        return None
    from .benchmarks import BENCHES

    if name not in BENCHES:
        raise ConfigError(f"unknown bench {name!r}; choose from {sorted(BENCHES)}")
    return BENCHES[name]()


def simulation_config(resolved):
    s, f, b, p = resolved["simulation"], resolved["fleet"], resolved["behavior"], resolved["pricing"]
    m, r = resolved["matching"], resolved["repositioning"]
    try:
        behavior = BehaviorConfig(
            max_wait=float(b["max_wait"]),
            max_wait_high=None if b["max_wait_high"] is None else float(b["max_wait_high"]),
            passenger_cancel=CancelCurve(float(b["passenger_cancel_threshold_m"]),
                                         float(b["passenger_cancel_probability"])),
            driver_cancel=CancelCurve(float(b["driver_cancel_threshold_m"]), float(b["driver_cancel_probability"])),
            max_idle_time=float(b["max_idle_time"]),
            offline_time=float(b["offline_time"]),
            offline_spread=float(b["offline_spread"]),
        )
        cfg = SimulationConfig(
            tick_length=float(s["tick_length"]),
            matching_interval=int(m["interval"]),
            start_time=float(s["start_time"]),
            end_time=float(s["end_time"]),
            fleet_size=int(f["size"]),
            placement=f["placement"],
            placement_nodes=tuple(int(x) for x in f["placement_nodes"]),
            speed=float(f["speed"]),
            radius=float(m["radius"]),
            pickup_metric=m["pickup_metric"],
            seed=int(s["seed"]),
            sample_fraction=float(s["sample_fraction"]),
            grid_rows=int(r["grid_rows"]),
            grid_cols=int(r["grid_cols"]),
            reposition=r["mode"],
            behavior=behavior,
            pricing=PricingRule(float(p["base_fare"]), float(p["included_distance"]), float(p["per_km_rate"])),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None
    if not 0.0 <= cfg.sample_fraction <= 1.0:
        raise ConfigError("sample_fraction must be in [0, 1]")
    return cfg


def learner_config(resolved):
    r = resolved["rl"]
    try:
        return LearnerConfig(gamma=float(r["gamma"]), lr_value=float(r["lr_value"]), lr_actor=float(r["lr_actor"]),
                             lr_critic=float(r["lr_critic"]), episodes=int(r["episodes"]),
                             temperature=float(r["temperature"]), bound=float(r["bound"]), collect=r["collect"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [rl] section: {exc}") from None


def _need_file(path, what):
    if not Path(path).is_file():
        raise ConfigError(f"{what} not found: {path}")
    return path


def project(lon, lat, lat0):
    """Local equirectangular projection to meters."""
    r = 6371008.8
    return np.column_stack([np.radians(lon) * r * math.cos(math.radians(lat0)), np.radians(lat) * r])


def snap_orders(path, net):
    """Read a lon/lat trip file and snap both ends to the nearest network node.

    Returns (pool, snap distances in meters).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [c.strip() for c in next(reader)]
        has_fare = header == SNAP_HEADER + ["fare"]
        if header != SNAP_HEADER and not has_fare:
            raise ConfigError(f"{path}:1: expected header {','.join(SNAP_HEADER)}[,fare]")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(x) for x in row[:len(header)]])
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad trip record ({exc})") from None
    arr = np.array(rows, dtype=float).reshape(-1, len(header))
    lat0 = float(np.mean(net.lat))
    tree = cKDTree(project(net.lon, net.lat, lat0))
    d_o, i_o = tree.query(project(arr[:, 1], arr[:, 2], lat0))
    d_d, i_d = tree.query(project(arr[:, 3], arr[:, 4], lat0))
    keep = i_o != i_d
    dropped = int((~keep).sum())
    if dropped:
        log.warning("%s: %d trips snap to the same node at both ends and were dropped", path, dropped)
    snap = np.concatenate([d_o[keep], d_d[keep]])
    if len(snap):
        log.info("snapped %d trips from %s: mean %.1f m, max %.1f m", int(keep.sum()), path, snap.mean(), snap.max())
    pool = OrderPool(arr[keep, 0], net.node_ids[i_o[keep]], net.node_ids[i_d[keep]],
                     arr[keep, 5] if has_fare else None)
    return pool, snap


@dataclass
class Setup:
    """Everything a command needs, built from one resolved config."""

    resolved: dict
    cfg: SimulationConfig
    network: object
    cache: RouteCache
    overlay: GridOverlay
    learner: LearnerConfig
    bench: object = None
    inputs: dict = field(default_factory=dict)
    snapped: object = None  # pool built by snapping lon/lat trips, kept for re-emission
    _pool: object = None

    def pool(self, seed=None):
        if self.bench is not None:
            return self.bench.pool(self.cfg.seed if seed is None else seed)
        return self._pool

    def scenarios(self, seeds):
        return [Scenario(self.cfg.replace(seed=int(s)), self.network, self.pool(int(s)), self.cache, self.overlay)
                for s in seeds]


def _network(resolved, bench, inputs):
    n = resolved["network"]
    if bench is not None:
        return bench.network
    if n["synthetic"] is not None:
        from .synthetic import grid_city

        syn = dict(n["synthetic"])
        try:
            return grid_city(int(syn.pop("rows")), int(syn.pop("cols")), **syn)
        except KeyError as exc:
            raise ConfigError(f"[network.synthetic] needs {exc}") from None
    if n["nodes"] is None or n["edges"] is None:
        raise ConfigError("[network] needs nodes and edges files, a synthetic table, or a bench")
    for key in ("nodes", "edges"):
        _need_file(n[key], f"network {key} file")
        inputs[n[key]] = file_digest(n[key])
    return load_network(n["nodes"], n["edges"], undirected=bool(n["undirected"]))


def _cache(resolved, net, inputs):
    n = resolved["network"]
    if n["routes"] is not None:
        _need_file(n["routes"], "route cache file")
        inputs[n["routes"]] = file_digest(n["routes"])
        return RouteCache.load(n["routes"], net)
    if n["cache"] not in ("lazy", "eager"):
        raise ConfigError(f"[network] cache must be 'lazy' or 'eager', got {n['cache']!r}")
    if n["cache"] == "eager":
        return RouteCache(net, eager=True).precompute()
    mt = n["max_trees"]
    return RouteCache(net, max_trees=None if mt is None else int(mt))


def build(resolved) -> Setup:
    bench = _bench(resolved)
    inputs = {}
    net = _network(resolved, bench, inputs)
    cfg = simulation_config(resolved) if bench is None else _bench_config(resolved, bench)
    cache = bench.cache if bench is not None and resolved["network"]["routes"] is None else _cache(resolved, net, inputs)
    overlay = bench.overlay if bench is not None else GridOverlay(net, cfg.grid_rows, cfg.grid_cols)
    setup = Setup(resolved, cfg, net, cache, overlay, learner_config(resolved), bench, inputs)
    if bench is None:
        setup._pool, setup.snapped = _demand(resolved, net, inputs)
    return setup


def _bench_config(resolved, bench):
    """A bench fixes its own scenario; explicit config values override it key by key."""
    cfg = bench.base
    given = resolved.get("_given", {})
    mine = simulation_config(resolved)
    changes = {}
    for section, keys in given.items():
        for key in keys:
            name = _FIELD.get((section, key))
            if name is not None:
                changes[name] = getattr(mine, name)
    if any(section == "behavior" for section in given):
        changes["behavior"] = mine.behavior
    if "pricing" in given:
        changes["pricing"] = mine.pricing
    try:
        return cfg.replace(**changes)
    except ValueError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None


_FIELD = {
    ("simulation", "start_time"): "start_time", ("simulation", "end_time"): "end_time",
    ("simulation", "tick_length"): "tick_length", ("simulation", "seed"): "seed",
    ("simulation", "sample_fraction"): "sample_fraction", ("fleet", "size"): "fleet_size",
    ("fleet", "placement"): "placement", ("fleet", "placement_nodes"): "placement_nodes",
    ("fleet", "speed"): "speed", ("matching", "interval"): "matching_interval",
    ("matching", "radius"): "radius", ("matching", "pickup_metric"): "pickup_metric",
    ("repositioning", "mode"): "reposition",
}


def _demand(resolved, net, inputs):
    d = resolved["demand"]
    s = resolved["simulation"]
    if d["orders"] is not None:
        path = _need_file(d["orders"], "order file")
        inputs[path] = file_digest(path)
        with open(path, newline="") as fh:
            header = [c.strip() for c in next(csv.reader(fh), [])]
        if header[:2] == SNAP_HEADER[:2]:
            pool, _ = snap_orders(path, net)
            return pool, pool
        if header[:3] != POOL_HEADER:
            raise ConfigError(f"{path}:1: unrecognised order header")
        try:
            pool = load_order_pool(path)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        missing = [int(x) for x in np.unique(np.concatenate([pool.origin, pool.destination])) if int(x) not in net]
        if missing:
            raise ConfigError(f"{path}: order nodes not in network, e.g. {missing[:5]}")
        return pool, None
    if d["rate"] is not None:
        from .synthetic import poisson_pool

        rate = float(d["rate"])
        if not rate > 0:
            raise ConfigError("[demand] rate must be > 0")
        rng = np.random.default_rng(int(d["seed"]))
        return poisson_pool(net, rate, float(s["start_time"]), float(s["end_time"]), rng), None
    raise ConfigError("[demand] needs an orders file or a synthetic rate")


def resolve(path=None, overrides=None):
    """Load a config file (or defaults only) and apply {section: {key: value}} overrides."""
    if path is not None:
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        base = path.parent
    else:
        raw, base = {}, None
    raw = copy.deepcopy(raw)
    for section, body in (overrides or {}).items():
        raw.setdefault(section, {}).update(body)
    resolved = merge(raw, base)
    resolved["_given"] = {sec: sorted(body) for sec, body in raw.items()}
    return resolved
