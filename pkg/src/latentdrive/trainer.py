"""Training loop: uniform window sampling, AdamW + one-cycle, exact resume.

Batches are drawn by iteration-indexed RNG (seeded from (seed, iteration)),
so a resumed run sees exactly the data the uninterrupted run would have.
Checkpoints carry model, optimiser, scheduler and torch generator state.
Each iteration appends one row to an append-only CSV metrics log.
"""

from __future__ import annotations

import csv
import time
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, TrainConfig
from .data import DrivingDataset, FrameBatch
from .losses import sequence_elbo_loss
from .model import WorldModel

CHECKPOINT_VERSION = 1

METRIC_FIELDS = [
    "iteration",
    "total",
    "action_nll",
    "bev_nll",
    "image_nll",
    "instance_center",
    "instance_offset",
    "kl_value",
    "kl_balanced",
    "lr",
]

__all__ = ["TrainConfig", "sample_windows", "train", "save_checkpoint", "load_checkpoint"]


def sample_windows(
    dataset: DrivingDataset,
    batch_size: int,
    seq_len: int,
    rng: np.random.Generator,
) -> FrameBatch:
    """Draw windows uniformly over every (episode, offset) pair."""
    counts = dataset.window_counts(seq_len)
    total = int(counts.sum())
    if total <= 0:
        raise ValueError(f"no episode holds a window of {seq_len} frames")
    bounds = np.concatenate([[0], np.cumsum(counts)])
    flat = rng.integers(0, total, size=batch_size)
    windows = []
    for idx in flat:
        ep = int(np.searchsorted(bounds, idx, side="right") - 1)
        windows.append(dataset.gather_window(ep, int(idx - bounds[ep]), seq_len))
    return dataset.collate(windows)


def save_checkpoint(
    path: str | Path,
    model: WorldModel,
    optimizer: torch.optim.Optimizer,
    scheduler,
    generator: torch.Generator,
    iteration: int,
    cfg: RunConfig,
) -> None:
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "iteration": iteration,
            "model": model.state_dict(),
            "optimizer": optimizer.state_dict(),
            "scheduler": scheduler.state_dict(),
            "generator": generator.get_state(),
            "config": cfg.to_dict(),
        },
        path,
    )


def load_checkpoint(path: str | Path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    version = ckpt.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {version} != supported {CHECKPOINT_VERSION}")
    return ckpt


def load_model(path: str | Path) -> tuple[WorldModel, RunConfig]:
    """Rebuild a WorldModel from a checkpoint file."""
    ckpt = load_checkpoint(path)
    cfg = RunConfig.from_dict(ckpt["config"])
    model = WorldModel(cfg)
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model, cfg


def _append_metrics(path: Path, row: dict) -> None:
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        if new:
            writer.writeheader()
        writer.writerow(row)


def train(
    cfg: RunConfig,
    dataset: DrivingDataset,
    out_dir: str | Path,
    resume: str | Path | None = None,
    quiet: bool = False,
) -> Path:
    """Run cfg.train.iterations optimisation steps; returns the final checkpoint path.

    A non-finite loss aborts immediately, dumping the offending batch next to
    the log for inspection.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tc = cfg.train
    torch.manual_seed(tc.seed)
    model = WorldModel(cfg)
    model.train()
    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=tc.lr,
        betas=tc.betas,
        eps=tc.eps,
        weight_decay=tc.weight_decay,
    )
    scheduler = torch.optim.lr_scheduler.OneCycleLR(
        optimizer,
        max_lr=tc.lr,
        total_steps=tc.iterations,
        pct_start=tc.one_cycle_pct_start,
    )
    generator = torch.Generator().manual_seed(tc.seed + 1)
    start_iter = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        model.load_state_dict(ckpt["model"])
        optimizer.load_state_dict(ckpt["optimizer"])
        scheduler.load_state_dict(ckpt["scheduler"])
        generator.set_state(ckpt["generator"])
        start_iter = int(ckpt["iteration"])

    cfg.save(out_dir / "config.yaml")
    metrics_path = out_dir / "metrics.csv"
    t0 = time.time()
    for it in range(start_iter, tc.iterations):
        rng = np.random.default_rng([tc.seed, it])
        batch = sample_windows(dataset, tc.batch_size, tc.seq_len, rng)
        breakdown = sequence_elbo_loss(batch, model, cfg.loss, generator)
        loss = breakdown.total
        if not torch.isfinite(loss):
            dump = out_dir / f"nan_batch_{it:06d}.npz"
            np.savez(
                dump,
                **{k: v.numpy() for k, v in vars(batch).items() if isinstance(v, torch.Tensor)},
            )
            raise RuntimeError(f"non-finite loss at iteration {it}; batch dumped to {dump}")
        optimizer.zero_grad()
        loss.backward()
        if tc.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
        optimizer.step()
        scheduler.step()

        if (it + 1) % tc.log_every == 0:
            row = breakdown.scalars()
            row["iteration"] = it + 1
            row["lr"] = scheduler.get_last_lr()[0]
            _append_metrics(metrics_path, row)
        if not quiet and (it + 1) % 200 == 0:
            rate = (it + 1 - start_iter) / max(time.time() - t0, 1e-9)
            print(
                f"iter {it + 1}/{tc.iterations} total {float(loss.detach()):.4f} "
                f"action {float(breakdown.action_nll.detach()):.4f} "
                f"bev {float(breakdown.bev_nll.detach()):.4f} "
                f"({rate:.2f} it/s)",
                flush=True,
            )
        if tc.checkpoint_every > 0 and (it + 1) % tc.checkpoint_every == 0:
            save_checkpoint(
                out_dir / f"ckpt_{it + 1:06d}.pt", model, optimizer, scheduler, generator, it + 1, cfg
            )

    final = out_dir / "ckpt_final.pt"
    save_checkpoint(final, model, optimizer, scheduler, generator, tc.iterations, cfg)
    return final
