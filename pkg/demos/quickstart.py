"""Synthesise and evaluate a certificate on the scalar test plant, through the CLI.

Runs in a few seconds::

    python3 demos/quickstart.py /tmp/quickstart
"""

import json
import sys
from pathlib import Path

from perception_cbf.cli import main

out = Path(sys.argv[1] if len(sys.argv) > 1 else "quickstart_out")
out.mkdir(parents=True, exist_ok=True)
config = out / "config.json"
config.write_text(json.dumps({
    "benchmark": "toy",
    "train": {"M1": 300, "M2": 8, "hidden": [32, 32], "epochs": 5, "init_steps": 200},
    "adaptive": {"max_iterations": 2, "initial_N": 10},
    "evaluation": {"episodes": 100, "horizon_s": 3.0},
}))

code = main(["synthesize", "--config", str(config), "--out", str(out / "run")])
print("synthesize exit code", code)
main(["evaluate", "--config", str(config), "--out", str(out / "run"), "--checkpoints", str(out / "run")])
main(["evaluate", "--config", str(config), "--out", str(out / "zero"), "--controller", "zero"])
