"""Synthetic 4x4-grid scenarios used to compare dispatch and repositioning policies.

`stranding` puts all pickups in the western column; a share of trips runs
to an empty eastern column and pays more, so instant-revenue dispatch keeps
sending drivers where they sit idle.  `hotspots` draws pickups from two
interior cells and destinations from anywhere, so idle drivers have to find
their way back to the demand.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .agents import BehaviorConfig
from .engine import SimulationConfig
from .network import GridOverlay, RouteCache
from .rl import Scenario
from .synthetic import grid_city, grid_node_weights, merge_pools, poisson_pool


@dataclass
class Bench:
    network: object
    overlay: GridOverlay
    cache: RouteCache
    base: SimulationConfig
    name: str

    def weights(self, grids):
        w = np.zeros(self.overlay.n_grids)
        w[list(grids)] = 1.0
        return grid_node_weights(self.overlay, w)

    def scenarios(self, seeds):
        return [Scenario(self.base.replace(seed=s), self.network, self.pool(s), self.cache, self.overlay)
                for s in seeds]


def _city():
    net = grid_city(24, 24, seed=3, drop_fraction=0.0, one_way_fraction=0.0)
    return net, GridOverlay(net, 4, 4), RouteCache(net)


class Stranding(Bench):
    west = (0, 4, 8, 12)
    east = (3, 7, 11, 15)

    def __init__(self, rate=0.15, fleet=30, horizon=3600.0, far_share=0.4):
        net, ov, cache = _city()
        base = SimulationConfig(end_time=horizon, fleet_size=fleet, placement="pool", radius=1000.0,
                                matching_interval=12, grid_rows=4, grid_cols=4,
                                behavior=BehaviorConfig(max_wait=180.0))
        super().__init__(net, ov, cache, base, "stranding")
        self.rate = rate
        self.far_share = far_share

    def pool(self, seed):
        rng = np.random.default_rng(seed)
        end = self.base.end_time
        w = self.weights(self.west)
        near = poisson_pool(self.network, self.rate * (1 - self.far_share), 0, end, rng,
                            origin_weights=w, destination_weights=w)
        far = poisson_pool(self.network, self.rate * self.far_share, 0, end, rng,
                           origin_weights=w, destination_weights=self.weights(self.east))
        return merge_pools(near, far)


class Hotspots(Bench):
    hot = (5, 10)

    def __init__(self, rate=0.05, fleet=40, horizon=3600.0):
        net, ov, cache = _city()
        base = SimulationConfig(end_time=horizon, fleet_size=fleet, placement="uniform", radius=800.0,
                                matching_interval=12, grid_rows=4, grid_cols=4, reposition="random",
                                behavior=BehaviorConfig(max_wait=180.0, max_idle_time=60.0))
        super().__init__(net, ov, cache, base, "hotspots")
        self.rate = rate

    def pool(self, seed):
        rng = np.random.default_rng(seed)
        return poisson_pool(self.network, self.rate, 0, self.base.end_time, rng,
                            origin_weights=self.weights(self.hot))


BENCHES = {"stranding": Stranding, "hotspots": Hotspots}
