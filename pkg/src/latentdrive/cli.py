"""Command-line entry points: collect, train, eval, sweep, rollout, show-config.

Every command takes one config file (or the built-in defaults) plus dotted
``--set section.key=value`` overrides; the fully resolved config is written
into each output directory so results are reproducible from disk alone.
The only environment variable honoured is LATENTDRIVE_OUT_ROOT, which
re-roots relative --out paths.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data, evaluate, trainer
from .config import RunConfig

# display colours for BeV class ids, BGR (background, road, marking,
# vehicle, pedestrian, red zone)
_LABEL_COLORS = np.array(
    [
        [40, 40, 40],
        [110, 110, 110],
        [235, 235, 235],
        [60, 80, 220],
        [70, 200, 250],
        [200, 80, 160],
    ],
    dtype=np.uint8,
)


def _load_config(args: argparse.Namespace) -> RunConfig:
    if getattr(args, "config", None):
        cfg = RunConfig.load(args.config)
    else:
        cfg = RunConfig()
    for item in getattr(args, "set", None) or []:
        cfg = _apply_override(cfg, item)
    return cfg


def _apply_override(cfg: RunConfig, item: str) -> RunConfig:
    if "=" not in item:
        raise ValueError(f"override '{item}' is not of the form section.key=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    tree = cfg.to_dict()
    node = tree
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ValueError(f"override '{key}' names an unknown config section")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ValueError(f"override '{key}' names an unknown config key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings need no quotes
    node[leaf] = value
    return RunConfig.from_dict(tree)


def _out_dir(path: str) -> Path:
    root = os.environ.get("LATENTDRIVE_OUT_ROOT")
    p = Path(path)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def parse_seed_spec(spec: str, base: int = 0) -> list[int]:
    """'5' -> base..base+4; '3:7' -> [3,4,5,6]; '1,4,9' -> [1,4,9]."""
    spec = spec.strip()
    if ":" in spec:
        lo, hi = spec.split(":", 1)
        lo_i, hi_i = int(lo), int(hi)
        if hi_i <= lo_i:
            raise ValueError(f"empty seed range '{spec}'")
        return list(range(lo_i, hi_i))
    if "," in spec:
        return [int(tok) for tok in spec.split(",") if tok.strip()]
    return list(range(base, base + int(spec)))


def _echo_config(cfg: RunConfig, out: Path) -> None:
    cfg.save(out / "config.yaml")


def cmd_collect(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    out = _out_dir(args.out)
    if args.episodes is not None:
        seeds = list(range(args.seeds_base, args.seeds_base + args.episodes))
    else:
        seeds = parse_seed_spec(args.seeds)
    _echo_config(cfg, out)
    paths = data.collect(cfg, out, seeds, workers=args.workers)
    print(f"collected {len(paths)} episode(s) under {out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    out = _out_dir(args.out)
    dataset = data.DrivingDataset(args.data)
    ckpt = trainer.train(cfg, dataset, out, resume=args.resume, quiet=args.quiet)
    print(f"final checkpoint: {ckpt}")
    return 0


def _load_checkpoint_model(path: str):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return trainer.load_model(p)


def cmd_eval(args: argparse.Namespace) -> int:
    model, cfg = _load_checkpoint_model(args.checkpoint)
    if args.config:
        cfg = _load_config(args)  # evaluation knobs may differ from training
    out = _out_dir(args.out)
    _echo_config(cfg, out)
    seeds = parse_seed_spec(args.seeds, base=cfg.eval.seed_base)
    rows = []
    for seed in seeds:
        row = evaluate.evaluate_seed(model, cfg, seed, args.ratio, variant=args.variant)
        rows.append(row)
        print(
            f"seed {seed}: D={row['D']:.3f} completion={row['R_completion']:.3f} "
            f"R_bar={row['R_bar']:.3f} mIoU={row['mIoU']:.3f} ({row['done_reason']})"
        )
    evaluate.write_results(out / "results.csv", rows)
    mean_d = float(np.mean([r["D"] for r in rows]))
    print(f"mean driving score over {len(rows)} seed(s): {mean_d:.3f}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    model, cfg = _load_checkpoint_model(args.checkpoint)
    if args.config:
        cfg = _load_config(args)
    out = _out_dir(args.out)
    _echo_config(cfg, out)
    ratios = [float(tok) for tok in args.ratios.split(",") if tok.strip()]
    seeds = parse_seed_spec(args.seeds, base=cfg.eval.seed_base)
    variants = ("full", "one_frame") if args.ablation else ("full",)
    rows = evaluate.imagination_sweep(
        model, cfg, seeds, ratios=ratios, out_dir=out, variants=variants, quiet=args.quiet
    )
    for variant in variants:
        agg = evaluate.aggregate(rows, variant)
        for ratio in sorted(agg):
            a = agg[ratio]
            print(
                f"{variant} ratio {ratio:.1f}: D={a['D']:.3f} R_bar={a['R_bar']:.3f} "
                f"mIoU={a['mIoU']:.3f} (n={a['n']})"
            )
    print(f"wrote {out / 'results.csv'} and {out / 'sweep.png'}")
    return 0


def cmd_rollout(args: argparse.Namespace) -> int:
    import cv2

    model, cfg = _load_checkpoint_model(args.checkpoint)
    if args.config:
        cfg = _load_config(args)
    out = _out_dir(args.out)
    _echo_config(cfg, out)
    roll = evaluate.imagined_rollout(
        model, cfg, seed=args.seed, context=args.context, horizon=args.horizon
    )
    strip = _label_strip(roll["gt"], roll["pred"], roll["imagined"])
    path = out / f"rollout_seed{args.seed}.png"
    cv2.imwrite(str(path), strip)
    n_imag = int(roll["imagined"].sum())
    print(f"wrote {path} ({len(roll['imagined'])} steps, {n_imag} imagined)")
    return 0


def _label_strip(gt: np.ndarray, pred: np.ndarray, imagined: np.ndarray) -> np.ndarray:
    """Two rows of BeV panels (ground truth above, decoded below), one column
    per step; imagined columns get a light border."""
    pad, scale = 2, 3
    panels = []
    for row in (gt, pred):
        cols = []
        for t in range(row.shape[0]):
            img = _LABEL_COLORS[row[t]]
            img = np.kron(img, np.ones((scale, scale, 1), dtype=np.uint8))
            border = 220 if imagined[t] else 70
            img = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), constant_values=border)
            cols.append(img)
        panels.append(np.concatenate(cols, axis=1))
    return np.concatenate(panels, axis=0)


def cmd_show_config(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    import yaml

    print(yaml.safe_dump(cfg.to_dict(), sort_keys=True), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentdrive",
        description="world-model imitation learning on a toy driving simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="YAML config file (defaults used if omitted)")
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="dotted config override, e.g. --set train.iterations=200",
        )

    p = sub.add_parser("collect", help="record expert episodes")
    common(p)
    p.add_argument("--seeds", default="1", help="'N', 'a:b', or 'a,b,c'")
    p.add_argument("--seeds-base", type=int, default=0, dest="seeds_base")
    p.add_argument("--episodes", type=int, help="episode count starting at --seeds-base")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("train", help="train the world model on a dataset")
    common(p)
    p.add_argument("--data", required=True, help="dataset root from 'collect'")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="closed-loop evaluation at one imagine ratio")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seeds", default="20")
    p.add_argument("--ratio", type=float, default=0.0)
    p.add_argument("--variant", choices=("full", "one_frame"), default="full")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="imagination-ratio sweep with table and plot")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ratios", default="0,0.1,0.2,0.3,0.4,0.5,0.6")
    p.add_argument("--seeds", default="20")
    p.add_argument("--ablation", action="store_true", help="also run the one-frame model")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("rollout", help="imagined BeV strip next to ground truth")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--context", type=int, default=6, help="observed steps before imagining")
    p.add_argument("--horizon", type=int, default=8, help="imagined steps")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("show-config", help="print the resolved config")
    common(p)
    p.set_defaults(func=cmd_show_config)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
