"""Closed-loop evaluation: drive the model in the simulator, score the runs.

Time is cut into fixed windows; within each window the first
`imagine_ratio` fraction of steps runs on imagination (actions from states
sampled off the prior, no observation consumed) and the remainder observes
(posterior mean from the rendered frame).  Metrics follow the episode log:
driving score = route completion x multiplicative infraction penalty,
cumulative/normalised reward, and BeV IoU against ground truth.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import sim
from .config import RunConfig
from .losses import LatentStateLite
from .model import WorldModel

INFRACTION_FACTORS = {
    "red_light": 0.7,
    "collision_vehicle": 0.6,
    "collision_pedestrian": 0.5,
}

SWEEP_RATIOS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6)

RESULT_FIELDS = ["ratio", "seed", "D", "R_completion", "I_penalty", "R", "R_bar", "mIoU"]


@dataclass
class ImaginationSchedule:
    """How much of each fixed window runs blind.

    window_s seconds per window, dt seconds per step; the first
    round(ratio * steps_per_window) steps of every window imagine, the rest
    observe.  Ratios beyond max_ratio are a configuration error.
    """

    window_s: float = 2.0
    dt: float = 0.1
    imagine_ratio: float = 0.0
    max_ratio: float = 0.6

    def __post_init__(self) -> None:
        if self.imagine_ratio < 0.0 or self.imagine_ratio > self.max_ratio + 1e-9:
            raise ValueError(
                f"imagine_ratio {self.imagine_ratio} outside [0, {self.max_ratio}]"
            )
        if self.window_s <= 0 or self.dt <= 0:
            raise ValueError("window_s and dt must be positive")

    @property
    def steps_per_window(self) -> int:
        return max(1, int(round(self.window_s / self.dt)))

    @property
    def imagine_steps(self) -> int:
        return int(round(self.imagine_ratio * self.steps_per_window))

    def imagined(self, step_idx: int) -> bool:
        return (step_idx % self.steps_per_window) < self.imagine_steps


@dataclass
class EpisodeLog:
    seed: int
    imagine_ratio: float
    route_length: float
    rewards: np.ndarray
    progress: np.ndarray
    actions: np.ndarray
    imagined: np.ndarray
    infractions: list[tuple[int, str]]
    done_reason: str
    pred_labels: np.ndarray | None = None
    gt_labels: np.ndarray | None = None
    variant: str = "full"

    @property
    def n_steps(self) -> int:
        return len(self.rewards)


def driving_score(log: EpisodeLog) -> dict[str, float]:
    """Completion fraction times the product of infraction penalty factors."""
    completion = float(np.clip(log.progress[-1] / log.route_length, 0.0, 1.0)) if log.n_steps else 0.0
    penalty = 1.0
    for _, kind in log.infractions:
        penalty *= INFRACTION_FACTORS.get(kind, 1.0)
    penalty = float(np.clip(penalty, 0.0, 1.0))
    return {
        "R_completion": completion,
        "I_penalty": penalty,
        "D": completion * penalty,
    }


def rewards(log: EpisodeLog) -> dict[str, float]:
    total = float(log.rewards.sum())
    return {"R": total, "R_bar": total / max(log.n_steps, 1)}


def bev_iou(logs, n_classes: int = 6) -> dict:
    """Intersection-over-union per class over all logged steps.

    Accepts one EpisodeLog or a list.  Classes absent from both prediction
    and ground truth everywhere are excluded from the mean.
    """
    if isinstance(logs, EpisodeLog):
        logs = [logs]
    tp = np.zeros(n_classes, dtype=np.int64)
    fp = np.zeros(n_classes, dtype=np.int64)
    fn = np.zeros(n_classes, dtype=np.int64)
    for log in logs:
        if log.pred_labels is None or log.gt_labels is None:
            continue
        pred = log.pred_labels.reshape(-1)
        gt = log.gt_labels.reshape(-1)
        for c in range(n_classes):
            p = pred == c
            g = gt == c
            tp[c] += int(np.count_nonzero(p & g))
            fp[c] += int(np.count_nonzero(p & ~g))
            fn[c] += int(np.count_nonzero(~p & g))
    denom = tp + fp + fn
    per_class = np.full(n_classes, np.nan)
    present = denom > 0
    per_class[present] = tp[present] / denom[present]
    miou = float(per_class[present].mean()) if present.any() else float("nan")
    return {"per_class": per_class, "mIoU": miou}


def drive(
    model: WorldModel,
    world: sim.WorldState,
    schedule: ImaginationSchedule,
    generator: torch.Generator | None = None,
    variant: str = "full",
    log_labels: bool = True,
) -> EpisodeLog:
    """Run one closed-loop episode; returns its log.

    variant "full": normal recurrent deployment.  variant "one_frame":
    before every observed update the recurrent history and previous action
    are zeroed, so inference sees only the current frame (imagined steps
    still roll forward from that memoryless state).
    """
    if variant not in ("full", "one_frame"):
        raise ValueError(f"unknown drive variant '{variant}'")
    if generator is None:
        generator = torch.Generator().manual_seed(world.seed)
    model.eval()
    dyn = model.dynamics
    rewards_l: list[float] = []
    progress_l: list[float] = []
    actions_l: list[np.ndarray] = []
    imagined_l: list[bool] = []
    preds: list[np.ndarray] = []
    gts: list[np.ndarray] = []

    with torch.no_grad():
        p = next(model.parameters())
        h = p.new_zeros(dyn.h_dim)
        s_prev = None  # state sample from the previous step, for f
        a_prev = p.new_zeros(dyn.action_dim)
        step_idx = 0
        while not world.done:
            imagined = schedule.imagined(step_idx)
            if s_prev is not None:
                h = dyn.deterministic_step(LatentStateLite(h=h, s=s_prev))
            if variant == "one_frame" and not imagined:
                h = torch.zeros_like(h)
                a_prev = torch.zeros_like(a_prev)
            if imagined:
                dist = dyn.prior(h, a_prev)
                s = dist.sample(generator)
            else:
                frame = sim.observe(world)
                x = model.encoder.encode_observation(frame)
                dist = dyn.posterior(h, a_prev, x)
                s = dist.mean
            action_t = model.predict_action(h, s)
            action = action_t.numpy().astype(np.float64)
            if log_labels:
                pred = model.decode_bev(h, s).logits.argmax(dim=-3).numpy().astype(np.uint8)
                preds.append(pred)
                gts.append(sim.render_bev_label(world))
            result = sim.step(world, action)
            rewards_l.append(result.reward)
            progress_l.append(world.progress)
            actions_l.append(action)
            imagined_l.append(imagined)
            s_prev, a_prev = s, action_t
            step_idx += 1

    return EpisodeLog(
        seed=world.seed,
        imagine_ratio=schedule.imagine_ratio,
        route_length=world.route.length,
        rewards=np.array(rewards_l, dtype=np.float64),
        progress=np.array(progress_l, dtype=np.float64),
        actions=np.stack(actions_l) if actions_l else np.zeros((0, 2)),
        imagined=np.array(imagined_l, dtype=bool),
        infractions=list(world.infractions),
        done_reason=world.done_reason,
        pred_labels=np.stack(preds) if preds else None,
        gt_labels=np.stack(gts) if gts else None,
        variant=variant,
    )


def imagined_rollout(
    model: WorldModel,
    cfg: RunConfig,
    seed: int,
    context: int = 6,
    horizon: int = 8,
) -> dict[str, np.ndarray]:
    """Observe `context` steps, then imagine `horizon` steps while the
    simulator replays the imagined actions.  Returns per-step decoded and
    ground-truth BeV labels plus the imagined-step mask, for visualisation.
    """
    if context < 1 or horizon < 1:
        raise ValueError("context and horizon must be >= 1")
    world = sim.build_world(cfg, seed)
    generator = torch.Generator().manual_seed(cfg.eval.sample_seed + seed)
    model.eval()
    dyn = model.dynamics
    preds, gts, imagined = [], [], []
    with torch.no_grad():
        p = next(model.parameters())
        h = p.new_zeros(dyn.h_dim)
        a_prev = p.new_zeros(dyn.action_dim)
        s_prev = None
        for step_idx in range(context + horizon):
            if world.done:
                break
            if s_prev is not None:
                h = dyn.deterministic_step(LatentStateLite(h=h, s=s_prev))
            blind = step_idx >= context
            if blind:
                s = dyn.prior(h, a_prev).sample(generator)
            else:
                frame = sim.observe(world)
                x = model.encoder.encode_observation(frame)
                s = dyn.posterior(h, a_prev, x).mean
            preds.append(model.decode_bev(h, s).logits.argmax(dim=-3).numpy().astype(np.uint8))
            gts.append(sim.render_bev_label(world))
            imagined.append(blind)
            action_t = model.predict_action(h, s)
            sim.step(world, action_t.numpy().astype(np.float64))
            s_prev, a_prev = s, action_t
    return {
        "pred": np.stack(preds),
        "gt": np.stack(gts),
        "imagined": np.array(imagined, dtype=bool),
    }


def drive_random(world: sim.WorldState, seed: int = 0) -> EpisodeLog:
    """Uniform-random actions; the no-model baseline."""
    rng = np.random.default_rng(seed)
    rewards_l, progress_l, actions_l = [], [], []
    while not world.done:
        action = rng.uniform(-1.0, 1.0, size=2)
        result = sim.step(world, action)
        rewards_l.append(result.reward)
        progress_l.append(world.progress)
        actions_l.append(action)
    return EpisodeLog(
        seed=world.seed,
        imagine_ratio=0.0,
        route_length=world.route.length,
        rewards=np.array(rewards_l),
        progress=np.array(progress_l),
        actions=np.stack(actions_l) if actions_l else np.zeros((0, 2)),
        imagined=np.zeros(len(rewards_l), dtype=bool),
        infractions=list(world.infractions),
        done_reason=world.done_reason,
        variant="random",
    )


def evaluate_seed(
    model: WorldModel,
    cfg: RunConfig,
    seed: int,
    ratio: float,
    variant: str = "full",
    log_labels: bool = True,
) -> dict:
    """One episode -> one flat result row."""
    world = sim.build_world(cfg, seed)
    schedule = ImaginationSchedule(
        window_s=cfg.eval.window_s,
        dt=cfg.sim.dt,
        imagine_ratio=ratio,
        max_ratio=cfg.eval.max_ratio,
    )
    generator = torch.Generator().manual_seed(cfg.eval.sample_seed + seed)
    log = drive(model, world, schedule, generator, variant=variant, log_labels=log_labels)
    row: dict = {"ratio": ratio, "seed": seed, "variant": variant}
    row.update(driving_score(log))
    row.update(rewards(log))
    row["mIoU"] = bev_iou([log], n_classes=cfg.bev.n_classes)["mIoU"] if log_labels else float("nan")
    row["steps"] = log.n_steps
    row["done_reason"] = log.done_reason
    return row


def imagination_sweep(
    model: WorldModel,
    cfg: RunConfig,
    seeds,
    ratios=SWEEP_RATIOS,
    out_dir: str | Path | None = None,
    variants=("full", "one_frame"),
    quiet: bool = True,
) -> list[dict]:
    """Evaluate every (variant, ratio, seed) triple; write table and plot."""
    rows: list[dict] = []
    for variant in variants:
        for ratio in ratios:
            for seed in seeds:
                row = evaluate_seed(model, cfg, int(seed), float(ratio), variant=variant)
                rows.append(row)
                if not quiet:
                    print(
                        f"{variant} ratio {ratio:.1f} seed {seed}: D={row['D']:.3f} "
                        f"R_bar={row['R_bar']:.3f} mIoU={row['mIoU']:.3f}",
                        flush=True,
                    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_results(out_dir / "results.csv", rows)
        plot_sweep(rows, out_dir / "sweep.png")
    return rows


def write_results(path: str | Path, rows: list[dict]) -> None:
    fields = RESULT_FIELDS + ["variant", "steps", "done_reason"]
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def aggregate(rows: list[dict], variant: str = "full") -> dict[float, dict[str, float]]:
    """Per-ratio means for one variant."""
    out: dict[float, dict[str, float]] = {}
    ratios = sorted({r["ratio"] for r in rows if r.get("variant", "full") == variant})
    for ratio in ratios:
        sel = [r for r in rows if r["ratio"] == ratio and r.get("variant", "full") == variant]
        ious = [r["mIoU"] for r in sel if not math.isnan(r["mIoU"])]
        out[ratio] = {
            "D": float(np.mean([r["D"] for r in sel])),
            "R_bar": float(np.mean([r["R_bar"] for r in sel])),
            "mIoU": float(np.mean(ious)) if ious else float("nan"),
            "n": len(sel),
        }
    return out


def plot_sweep(rows: list[dict], path: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9.0, 3.5))
    for variant, style in (("full", "o-"), ("one_frame", "s--")):
        agg = aggregate(rows, variant)
        if not agg:
            continue
        ratios = sorted(agg)
        axes[0].plot(ratios, [agg[r]["D"] for r in ratios], style, label=variant)
        axes[1].plot(ratios, [agg[r]["mIoU"] for r in ratios], style, label=variant)
    axes[0].set_xlabel("imagine ratio")
    axes[0].set_ylabel("driving score")
    axes[1].set_xlabel("imagine ratio")
    axes[1].set_ylabel("BeV mIoU")
    for ax in axes:
        ax.grid(alpha=0.3)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
