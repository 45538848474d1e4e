#!/usr/bin/env python3
"""Put a trained model behind the wheel, with and without imagination.

Usage: python demos/closed_loop.py [checkpoint]

Without an argument this picks up the checkpoint train_short.py leaves
behind (training it first if needed). A 200-iteration model drives badly;
point this at a full run's ckpt_final.pt to see real scores.
"""

import os
import subprocess
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from latentdrive import evaluate, sim, trainer

out = Path(os.environ.get("LATENTDRIVE_OUT_ROOT", "/tmp/latentdrive-demos"))
if len(sys.argv) > 1:
    ckpt = Path(sys.argv[1])
else:
    ckpt = out / "short_run" / "ckpt_final.pt"
    if not ckpt.exists():
        subprocess.run([sys.executable, str(Path(__file__).with_name("train_short.py"))], check=True)

model, cfg = trainer.load_model(ckpt)
print(f"loaded {ckpt} ({model.parameter_count():,} parameters)")

seeds = [cfg.eval.seed_base, cfg.eval.seed_base + 1]
print(f"\n{'seed':>6} {'ratio':>6} {'variant':>10} {'D':>6} {'R_bar':>6} {'mIoU':>6}  end")
for seed in seeds:
    for ratio, variant in [(0.0, "full"), (0.3, "full"), (0.0, "one_frame")]:
        row = evaluate.evaluate_seed(model, cfg, seed, ratio, variant=variant)
        print(f"{seed:>6} {ratio:>6.1f} {variant:>10} {row['D']:>6.3f} "
              f"{row['R_bar']:>6.3f} {row['mIoU']:>6.3f}  {row['done_reason']}")

# random baseline for scale
d_rand = sum(
    evaluate.driving_score(evaluate.drive_random(sim.build_world(cfg, s), seed=s))["D"]
    for s in seeds
) / len(seeds)
print(f"\nrandom-action driving score on the same seeds: {d_rand:.3f}")

# imagined rollout: observe a few steps, then predict BeV blind
roll = evaluate.imagined_rollout(model, cfg, seed=seeds[0], context=6, horizon=8)
n = len(roll["imagined"])
fig, axes = plt.subplots(2, n, figsize=(1.1 * n, 2.6))
for t in range(n):
    axes[0, t].imshow(roll["gt"][t], cmap="tab10", vmin=0, vmax=9)
    axes[1, t].imshow(roll["pred"][t], cmap="tab10", vmin=0, vmax=9)
    axes[0, t].set_title("imag" if roll["imagined"][t] else "obs", fontsize=7)
    for ax in (axes[0, t], axes[1, t]):
        ax.set_xticks([])
        ax.set_yticks([])
axes[0, 0].set_ylabel("truth", fontsize=8)
axes[1, 0].set_ylabel("decoded", fontsize=8)
fig.tight_layout()
fig.savefig(out / "imagined_rollout.png", dpi=130)
print("wrote", out / "imagined_rollout.png")
