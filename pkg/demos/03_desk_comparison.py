"""Compare all methods on the desk-scale synthetic task.

Uses configs/desk.toml (20k source, 20k target rows) but only a few trials,
so it finishes in a few minutes. Pass a trial count as the first argument
for more. The full comparison is ``llpcs multirun --config configs/desk.toml``.
"""
import sys
from pathlib import Path

import numpy as np

from llpcs import cli
from llpcs import trainer as T

trials = int(sys.argv[1]) if len(sys.argv) > 1 else 2
cfg = cli._read_config(Path(__file__).resolve().parents[1] / "configs" / "desk.toml")
source, target, test = cli.load_datasets(cfg)
var = float(test.labels.var())

table = {}
for label, bagger in cli.baggers(cfg):
    for base in cli.train_configs(cfg):
        config = cli._by_k(base, cfg, label)
        mr = T.multi_run(config, trials, source, target, test, bagger)
        table.setdefault(config.method, {})[label] = mr.mean / var
        print(f"{config.method:>14} k={label:<4} mse/var {mr.mean / var:.3f}", flush=True)

ks = sorted({k for row in table.values() for k in row})
print("\nmse relative to label variance")
print(f"{'method':>14} " + " ".join(f"{'k=' + str(k):>8}" for k in ks))
for method, row in table.items():
    print(f"{method:>14} " + " ".join(f"{row[k]:>8.3f}" for k in ks))
