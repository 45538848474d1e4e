#!/usr/bin/env python3
"""Watch the scripted expert drive one episode and dump what it sees."""

import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from latentdrive import sim
from latentdrive.config import RunConfig

out = Path(os.environ.get("LATENTDRIVE_OUT_ROOT", "/tmp/latentdrive-demos")) / "expert_lap"
out.mkdir(parents=True, exist_ok=True)

cfg = RunConfig()
world = sim.build_world(cfg, seed=11)
print(f"template '{world.template}', route {world.route.length:.0f} m, "
      f"{len(world.zones)} traffic light(s), {len(world.agents)} other agent(s)")

snapshots = []
while not world.done:
    action = sim.expert_action(world)
    if world.tick % 100 == 0:
        frame = sim.observe(world)
        snapshots.append((world.tick, frame))
        print(f"tick {world.tick:4d}: progress {world.progress:6.1f} m, "
              f"speed {world.ego_speed:4.1f} m/s, action ({action[0]:+.2f}, {action[1]:+.2f})")
    sim.step(world, action)

completion = min(1.0, world.progress / world.route.length)
print(f"done: {world.done_reason}, completion {completion:.2f}, "
      f"infractions {[k for _, k in world.infractions] or 'none'}")

fig, axes = plt.subplots(2, len(snapshots), figsize=(2.2 * len(snapshots), 4.2))
for col, (tick, frame) in enumerate(snapshots):
    axes[0, col].imshow(np.moveaxis(frame.image, 0, -1))
    axes[0, col].set_title(f"t={tick}", fontsize=8)
    axes[1, col].imshow(frame.bev_label, cmap="tab10", vmin=0, vmax=9)
    for ax in (axes[0, col], axes[1, col]):
        ax.set_xticks([])
        ax.set_yticks([])
axes[0, 0].set_ylabel("camera", fontsize=8)
axes[1, 0].set_ylabel("BeV labels", fontsize=8)
fig.tight_layout()
fig.savefig(out / "expert_lap.png", dpi=130)
print("wrote", out / "expert_lap.png")
