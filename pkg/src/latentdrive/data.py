"""Frames, episodes and the on-disk dataset format.

One directory per episode: `manifest.json` describes the run (seed, frame
count, tick/storage rates, camera matrices, grid specs) and the dtype/shape
of every array; each array lives in its own little-endian flat binary file.
Images and labels store as uint8, everything else as float32.
"""

from __future__ import annotations

import json
import multiprocessing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

DATASET_FORMAT_VERSION = 1

# name -> (dtype, per-frame shape suffix factory)
_ARRAY_SPECS = {
    "images": "<u1",
    "routes": "<u1",
    "speeds": "<f4",
    "actions": "<f4",
    "bev_labels": "<u1",
    "centers": "<f4",
    "offsets": "<f4",
    "rewards": "<f4",
    "progress": "<f4",
}


@dataclass
class ObservationFrame:
    """One recorded step.

    image: (3, H, W) float32 in [0, 1]; route: (1, Hr, Wr) float32 in [0, 1];
    speed: m/s; action: (2,) float32 in [-1, 1] executed at this step;
    bev_label: (Hb, Wb) uint8 class ids; centers/offsets: instance targets.
    """

    image: np.ndarray
    route: np.ndarray
    speed: float
    action: np.ndarray
    bev_label: np.ndarray
    center: np.ndarray | None = None
    offset: np.ndarray | None = None

    def validate(self, n_classes: int = 6) -> None:
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        if self.route.min() < 0.0 or self.route.max() > 1.0:
            raise ValueError("route values must lie in [0, 1]")
        if np.any(np.abs(self.action) > 1.0 + 1e-6):
            raise ValueError("actions must lie in [-1, 1]")
        if self.bev_label.max() >= n_classes:
            raise ValueError("bev_label contains an out-of-range class id")


@dataclass
class EpisodeRecord:
    """All frames of one episode as stacked arrays plus the manifest dict."""

    manifest: dict
    arrays: dict[str, np.ndarray] = field(repr=False)

    @property
    def n_frames(self) -> int:
        return int(self.manifest["n_frames"])

    @property
    def seed(self) -> int:
        return int(self.manifest["seed"])

    def save(self, ep_dir: str | Path) -> None:
        ep_dir = Path(ep_dir)
        ep_dir.mkdir(parents=True, exist_ok=True)
        files = {}
        for name, arr in self.arrays.items():
            dtype = _ARRAY_SPECS[name]
            data = np.ascontiguousarray(arr.astype(dtype, copy=False))
            (ep_dir / f"{name}.bin").write_bytes(data.tobytes())
            files[name] = {"dtype": dtype, "shape": list(arr.shape)}
        manifest = dict(self.manifest)
        manifest["format_version"] = DATASET_FORMAT_VERSION
        manifest["files"] = files
        (ep_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))

    @classmethod
    def load(cls, ep_dir: str | Path, mmap: bool = True) -> "EpisodeRecord":
        ep_dir = Path(ep_dir)
        manifest = json.loads((ep_dir / "manifest.json").read_text())
        version = manifest.get("format_version")
        if version != DATASET_FORMAT_VERSION:
            raise ValueError(
                f"dataset format version {version} != supported {DATASET_FORMAT_VERSION}"
            )
        arrays = {}
        for name, meta in manifest["files"].items():
            path = ep_dir / f"{name}.bin"
            shape = tuple(meta["shape"])
            if mmap:
                arrays[name] = np.memmap(path, dtype=meta["dtype"], mode="r", shape=shape)
            else:
                arrays[name] = np.frombuffer(path.read_bytes(), dtype=meta["dtype"]).reshape(shape)
        return cls(manifest=manifest, arrays=arrays)


@dataclass
class FrameBatch:
    """Stacked training windows, shapes (B, T, ...), torch tensors."""

    images: torch.Tensor
    routes: torch.Tensor
    speeds: torch.Tensor
    actions: torch.Tensor
    bev_labels: torch.Tensor
    centers: torch.Tensor | None = None
    offsets: torch.Tensor | None = None

    @property
    def batch_size(self) -> int:
        return self.images.shape[0]

    @property
    def seq_len(self) -> int:
        return self.images.shape[1]

    def to(self, dtype: torch.dtype) -> "FrameBatch":
        def cast(x):
            return None if x is None else x.to(dtype)

        return FrameBatch(
            images=cast(self.images),
            routes=cast(self.routes),
            speeds=cast(self.speeds),
            actions=cast(self.actions),
            bev_labels=self.bev_labels,
            centers=cast(self.centers),
            offsets=cast(self.offsets),
        )

    @classmethod
    def from_frames(cls, frames: Sequence[ObservationFrame]) -> "FrameBatch":
        """Single sequence (B = 1) from a list of frames."""

        def stack(get):
            return torch.from_numpy(np.stack([get(f) for f in frames])[None])

        has_instance = frames[0].center is not None
        return cls(
            images=stack(lambda f: f.image.astype(np.float32)),
            routes=stack(lambda f: f.route.astype(np.float32)),
            speeds=torch.tensor([[f.speed for f in frames]], dtype=torch.float32),
            actions=stack(lambda f: f.action.astype(np.float32)),
            bev_labels=stack(lambda f: f.bev_label.astype(np.int64)),
            centers=stack(lambda f: f.center.astype(np.float32)) if has_instance else None,
            offsets=stack(lambda f: f.offset.astype(np.float32)) if has_instance else None,
        )


class DrivingDataset:
    """Lazy view over every episode directory under a root."""

    def __init__(self, root: str | Path, mmap: bool = True) -> None:
        self.root = Path(root)
        dirs = sorted(p for p in self.root.iterdir() if (p / "manifest.json").exists())
        if not dirs:
            raise FileNotFoundError(f"no episode directories under {self.root}")
        self.episodes = [EpisodeRecord.load(d, mmap=mmap) for d in dirs]

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def n_frames(self) -> int:
        return sum(ep.n_frames for ep in self.episodes)

    def window_counts(self, seq_len: int) -> np.ndarray:
        """Number of length-T windows each episode contributes."""
        return np.array([max(0, ep.n_frames - seq_len + 1) for ep in self.episodes])

    def gather_window(self, ep_idx: int, start: int, seq_len: int) -> dict[str, np.ndarray]:
        ep = self.episodes[ep_idx]
        sl = slice(start, start + seq_len)
        return {name: np.asarray(arr[sl]) for name, arr in ep.arrays.items()}

    def collate(self, windows: list[dict[str, np.ndarray]]) -> FrameBatch:
        def stack(name, dtype):
            return torch.from_numpy(np.stack([w[name] for w in windows]).astype(dtype))

        images = stack("images", np.float32) / 255.0
        routes = stack("routes", np.float32) / 255.0
        has_instance = "centers" in windows[0]
        return FrameBatch(
            images=images,
            routes=routes,
            speeds=stack("speeds", np.float32),
            actions=stack("actions", np.float32),
            bev_labels=stack("bev_labels", np.int64),
            centers=stack("centers", np.float32) if has_instance else None,
            offsets=stack("offsets", np.float32) if has_instance else None,
        )


def episode_dir_name(seed: int) -> str:
    return f"ep_{seed:06d}"


def _collect_one(args) -> str:
    from . import sim  # local import keeps worker start cheap

    cfg, out_root, seed = args
    record = sim.run_expert_episode(cfg, seed)
    ep_dir = Path(out_root) / episode_dir_name(seed)
    record.save(ep_dir)
    return str(ep_dir)


def collect(cfg, out_root: str | Path, seeds: Sequence[int], workers: int = 1) -> list[str]:
    """Run the scripted expert for every seed and write one episode each.

    Seeds must be unique (a duplicate would silently overwrite its twin, so
    it is refused).  Re-collecting an existing seed rewrites the directory
    with byte-identical content; collection is deterministic per seed.
    """
    seeds = list(seeds)
    if len(set(seeds)) != len(seeds):
        dupes = sorted({s for s in seeds if seeds.count(s) > 1})
        raise ValueError(f"duplicate seed(s) in collection request: {dupes}")
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, out_root, s) for s in seeds]
    if workers > 1:
        with multiprocessing.Pool(workers) as pool:
            return list(pool.map(_collect_one, jobs))
    return [_collect_one(j) for j in jobs]
