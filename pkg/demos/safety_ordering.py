"""Unsafe ratio of the perception-trusting baseline against the GP-backed pipeline.

Trains at desk scale (M1 = 2000) and scores each final controller on 500
critical-set episodes.  Expect several minutes per run on one CPU::

    python3 demos/safety_ordering.py dubins 0 1 2
"""

import sys

import numpy as np

from perception_cbf import adaptive
from perception_cbf.confset import EstimatorConfig
from perception_cbf.dynamics import get_system
from perception_cbf.evaluation import EvalConfig, make_ecm, unsafe_ratio
from perception_cbf.synthesis import TrainConfig

bench = sys.argv[1] if len(sys.argv) > 1 else "dubins"
seeds = [int(s) for s in sys.argv[2:]] or [0]
system = get_system(bench)
tcfg, ecfg = TrainConfig(M1=2000), EstimatorConfig()

print("strategy  seed  outcome  calls  unsafe_ratio")
for strategy in ("nogp", "uniform", "adaptive"):
    for seed in seeds:
        res = adaptive.run(system, adaptive.AdaptiveConfig(strategy=strategy), tcfg, ecfg, np.random.default_rng(seed))
        ecm = make_ecm(system, res.pi, res.model, ecfg)
        rep = unsafe_ratio(system, ecm, EvalConfig(episodes=500), np.random.default_rng(0))
        outcome = "success" if res.success else "failure"
        print(f"{strategy:9s} {seed:4d}  {outcome:7s}  {res.perception_calls:5d}  {rep.unsafe_ratio:.3f}", flush=True)
