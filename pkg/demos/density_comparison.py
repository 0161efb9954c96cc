"""Where the two sampling strategies put their perception queries on Dubins.

Runs both strategies with the same budget of perception calls and prints the
(px, py) histograms of the collected datasets side by side::

    python3 demos/density_comparison.py 400
"""

import sys

import numpy as np

from perception_cbf import adaptive
from perception_cbf.confset import EstimatorConfig
from perception_cbf.dynamics import dubins
from perception_cbf.evaluation import export_density
from perception_cbf.synthesis import TrainConfig

budget = int(sys.argv[1]) if len(sys.argv) > 1 else 400
system = dubins()
grids = {}
for strategy in ("uniform", "adaptive"):
    acfg = adaptive.AdaptiveConfig(strategy=strategy, budget=budget, initial_N=min(100, budget // 2))
    res = adaptive.run(system, acfg, TrainConfig(M1=2000), EstimatorConfig(), np.random.default_rng(0))
    grids[strategy] = res.dataset.x

n = min(len(x) for x in grids.values())
for strategy, x in grids.items():
    counts, _, _ = export_density(x[:n], (0, 1), 10, system.state_lo, system.state_hi)
    print(f"{strategy}: |D| = {n}, peak bin {counts.max()}")
    # rows run along px, columns along py, both over [-3, 3]; S is |px|, |py| < 2
    for row in counts:
        print("  " + " ".join(f"{v:3d}" for v in row))
