#!/usr/bin/env python3
"""Record a couple of expert episodes, then read them back as training batches.

Every episode is a directory of flat binary arrays plus a json manifest, so
nothing here depends on pickle or on this package's versioning beyond the
format_version field.
"""

import json
import os
from pathlib import Path

import numpy as np

from latentdrive import data, trainer
from latentdrive.config import RunConfig

out = Path(os.environ.get("LATENTDRIVE_OUT_ROOT", "/tmp/latentdrive-demos")) / "dataset"
cfg = RunConfig()

paths = data.collect(cfg, out, seeds=[0, 1])
print("episode directories:")
for p in paths:
    print("  ", p)

manifest = json.loads((Path(paths[0]) / "manifest.json").read_text())
print(f"seed {manifest['seed']}: {manifest['n_frames']} frames at "
      f"{manifest['stored_rate_hz']:.0f} Hz, template '{manifest['template']}', "
      f"ended '{manifest['done_reason']}'")
print("stored arrays:", ", ".join(sorted(manifest["files"])))

dataset = data.DrivingDataset(out)
print(f"\ndataset: {len(dataset)} episodes, {dataset.n_frames} frames, "
      f"{int(dataset.window_counts(cfg.train.seq_len).sum())} windows of T={cfg.train.seq_len}")

batch = trainer.sample_windows(dataset, batch_size=4, seq_len=cfg.train.seq_len,
                               rng=np.random.default_rng(0))
print("one training batch:")
print("  images    ", tuple(batch.images.shape), batch.images.dtype)
print("  routes    ", tuple(batch.routes.shape))
print("  actions   ", tuple(batch.actions.shape))
print("  bev_labels", tuple(batch.bev_labels.shape), batch.bev_labels.dtype)
print("  speed range", float(batch.speeds.min()), "to", float(batch.speeds.max()))
