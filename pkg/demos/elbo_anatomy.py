#!/usr/bin/env python3
"""Pull one batch through the sequence ELBO and look at the pieces.

Also checks the observation-dropout story empirically: the lengths of
consecutive prior-driven steps should follow a geometric distribution.
"""

import os
from pathlib import Path

import numpy as np
import torch

from latentdrive import data, losses, trainer
from latentdrive.config import RunConfig
from latentdrive.model import WorldModel

root = Path(os.environ.get("LATENTDRIVE_OUT_ROOT", "/tmp/latentdrive-demos")) / "dataset"
cfg = RunConfig()
if not root.exists():
    data.collect(cfg, root, seeds=[0, 1])
dataset = data.DrivingDataset(root)
batch = trainer.sample_windows(dataset, 4, cfg.train.seq_len, np.random.default_rng(0))

torch.manual_seed(0)
model = WorldModel(cfg)
gen = torch.Generator().manual_seed(1)
with torch.no_grad():
    out = losses.sequence_elbo_loss(batch, model, cfg.loss, gen)

w = cfg.loss
print("untrained model, one batch of", batch.batch_size, "windows x", batch.seq_len, "steps")
print(f"  action L1        {float(out.action_nll):8.3f}  (weight {w.action})")
print(f"  BeV top-k CE     {float(out.bev_nll):8.3f}  (weight {w.segmentation})")
print(f"  instance center  {float(out.instance_center):8.5f}  (x{w.instance_center} inside weight {w.instance})")
print(f"  instance offset  {float(out.instance_offset):8.3f}")
print(f"  KL(q || p)       {float(out.kl_value):8.3f}  (weight {w.kl}, balance {w.kl_balance})")
print(f"  weighted total   {float(out.total):8.3f}")
frac = float(out.posterior_mask.float().mean())
print(f"  posterior kept on {frac:.0%} of steps (p_drop = {w.p_drop})")

# dropout mask run lengths vs the geometric law they should follow
mask = losses.sample_dropout_mask((200_000,), w.p_drop, torch.Generator().manual_seed(2))
runs, count = [], 0
for keep in mask.tolist():
    if keep:
        runs.append(count)
        count = 0
    else:
        count += 1
emp = np.bincount(runs, minlength=6)[:6] / len(runs)
theory = losses.geometric_run_length_pmf(w.p_drop, 6).numpy()
print("\nprior-run length distribution (empirical vs geometric):")
for k in range(6):
    print(f"  k={k}: {emp[k]:.4f} vs {theory[k]:.4f}")
