"""Train on shapes whose family mostly predicts the background, then test on swapped backgrounds.

    python demos/03_counterfactual.py max
"""
import os
import sys
import tempfile

import torch

from percept.experiments import robustness_run, trend_config
from percept.synthdata import CounterfactualConfig

pool = sys.argv[1] if len(sys.argv) > 1 else "max"
torch.set_num_threads(int(os.environ.get("PERCEPT_THREADS", "1")))
cf = CounterfactualConfig(colors=("white",), textures=("solid",))
with tempfile.TemporaryDirectory() as cache:
    table = robustness_run(trend_config(epochs=10), pool, seed=0, cache_dir=cache, rho=0.95, n_train=1000,
                           n_test=200, cf=cf)
print(f"{pool}: accuracy (%) by shape family and background; delta = counterfactual minus matched")
print(table.to_csv())
print(f"mean |delta| = {table.mean_abs_delta():.1f}")
