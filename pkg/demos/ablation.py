"""Compare the four ablation presets on the desk configuration.

Trains protonet, protonet_ae, cplae_noshuffle and cplae on the same seeds and
prints mean test accuracy and Davies-Bouldin index per preset.  One seed takes
about 12 minutes on one CPU core; pass seeds as arguments.

    python3 demos/ablation.py 0 1
"""

import sys
from pathlib import Path

from cplae.config import RunConfig
from cplae.evaluation import ablation_run

seeds = [int(s) for s in sys.argv[1:]] or [0]
config = RunConfig.load(Path(__file__).resolve().parents[1] / "configs" / "desk.json")
dataset = config.load_data()
result = ablation_run(dataset, config, seeds)
print(result.to_text())
