"""Learn a grid value table on the stranding bench and compare it with myopic dispatch.

Far trips pay more but leave drivers in the empty east; the table learns
what an hour-long shift loses by going there.
"""

import numpy as np

from ridesim.benchmarks import Stranding
from ridesim.rl import PDB, LearnerConfig, Myopic, ValueTableMatching, rollout, train


def main(episodes=100):
    bench = Stranding()
    learner = LearnerConfig(gamma=0.97, lr_value=0.1, episodes=episodes)
    result = train("matching", bench.scenarios(range(8)), learner)
    test = bench.scenarios(range(100, 105))
    for name, pol in (("Myopic", Myopic()), ("PDB", PDB()), ("RL", ValueTableMatching(result.tables, 0.97))):
        reps = [rollout(pol, sc)[0] for sc in test]
        print(f"{name:7s} revenue {np.mean([r.platform_revenue for r in reps]):8.1f}"
              f"  frao {np.mean([r.frao for r in reps]):.3f}")


if __name__ == "__main__":
    main()
