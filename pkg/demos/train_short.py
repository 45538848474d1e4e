#!/usr/bin/env python3
"""A short training run on a freshly collected mini dataset.

200 iterations is nowhere near convergence; the point is to watch the loss
move and to leave behind a checkpoint the closed_loop demo can reuse.
"""

import csv
import dataclasses
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from latentdrive import data, trainer
from latentdrive.config import RunConfig

out = Path(os.environ.get("LATENTDRIVE_OUT_ROOT", "/tmp/latentdrive-demos"))
cfg = RunConfig()
cfg.train = dataclasses.replace(cfg.train, iterations=200, batch_size=8, checkpoint_every=0)

ds_root = out / "dataset"
if not ds_root.exists():
    data.collect(cfg, ds_root, seeds=[0, 1])
dataset = data.DrivingDataset(ds_root)

ckpt = trainer.train(cfg, dataset, out / "short_run", quiet=False)
print("checkpoint:", ckpt)

with (out / "short_run" / "metrics.csv").open() as fh:
    rows = list(csv.DictReader(fh))
iters = [int(r["iteration"]) for r in rows]
fig, ax = plt.subplots(figsize=(5, 3))
ax.plot(iters, [float(r["total"]) for r in rows], label="total")
ax.plot(iters, [float(r["action_nll"]) for r in rows], label="action L1")
ax.plot(iters, [float(r["bev_nll"]) for r in rows], label="BeV CE")
ax.set_xlabel("iteration")
ax.set_yscale("log")
ax.legend()
ax.grid(alpha=0.3)
fig.tight_layout()
fig.savefig(out / "short_run" / "loss.png", dpi=130)
print("wrote", out / "short_run" / "loss.png")
