"""Simulate one hour of a synthetic city and print the headline metrics."""

import numpy as np

from ridesim.engine import SimulationConfig, run
from ridesim.synthetic import grid_city, poisson_pool


def main():
    net = grid_city(20, 20, seed=1)
    pool = poisson_pool(net, 0.08, 0, 3600, np.random.default_rng(0))
    cfg = SimulationConfig(end_time=3600.0, fleet_size=40, matching_interval=6, radius=1200.0)
    report, sim = run(cfg, net, pool)
    print(net)
    for key in ("produced", "matched", "finished", "cancelled", "matching_rate", "avg_matching_time",
                "avg_pickup_time", "platform_revenue", "occupancy_rate"):
        print(f"{key:18s} {getattr(report, key):.4g}")
    print(f"{len(sim.log)} events logged")


if __name__ == "__main__":
    main()
