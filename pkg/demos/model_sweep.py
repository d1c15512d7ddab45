"""Score the six analytical matching models on a small (Q, N) grid."""

import numpy as np

from ridesim.engine import SimulationConfig
from ridesim.synthetic import grid_city, poisson_pool
from ridesim.theory import METRICS, Model, SweepSpec, sweep


def main():
    net = grid_city(16, 16, seed=2)
    pool = poisson_pool(net, 0.2, 0, 2400, np.random.default_rng(0))
    spec = SweepSpec(SimulationConfig(end_time=2400.0, matching_interval=6, radius=1500.0), net, pool,
                     Q=[0.02, 0.05, 0.1], N=[15, 30, 60], seeds=(0, 1, 2, 3, 4))
    report = sweep(spec)
    cal = report.calibration
    print(f"Cobb-Douglas fit: A={cal.cd_A:.3g} alpha={cal.cd_alpha:.3g} beta={cal.cd_beta:.3g}")
    for metric in METRICS:
        print(f"\n{metric}")
        for m in Model:
            value, skipped = report.mape(m, metric)
            shown = "   n/a" if value is None else f"{value:6.3f}"
            print(f"  {m.value:16s} MAPE {shown}  ({skipped} undefined)")
        print("  best:", ", ".join(f"Q={b.Q} N={b.N}: {b.label}" for b in report.best_fit(metric)))


if __name__ == "__main__":
    main()
