"""Run configuration: one dataclass tree, one YAML file, strict keys.

`RunConfig` carries every tunable for simulation, model shape, loss
weighting, training and closed-loop evaluation.  Loading rejects unknown
keys so typos fail loudly instead of silently using defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .geometry import BevGridSpec, CameraModel
from .losses import LossWeights


@dataclass
class CameraConfig:
    image_hw: tuple[int, int] = (64, 96)
    feature_stride: int = 8
    horizontal_fov_deg: float = 100.0
    # camera origin in the vehicle frame (forward, right, up), metres
    position: tuple[float, float, float] = (0.5, 0.0, 1.4)
    depth_min: float = 1.0
    depth_max: float = 25.0
    depth_bins: int = 24

    def build(self) -> CameraModel:
        h, w = self.image_hw
        fx = (w / 2.0) / math.tan(math.radians(self.horizontal_fov_deg) / 2.0)
        # Camera axes: x = image right, y = up, z = forward.  The mount that
        # takes those axes to the vehicle frame (forward, right, up) is the
        # even permutation below (det +1); a negative y focal length then
        # makes pixel v grow downward as usual.
        k = np.array([[fx, 0.0, w / 2.0], [0.0, -fx, h / 2.0], [0.0, 0.0, 1.0]])
        m = np.eye(4)
        m[:3, :3] = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        m[:3, 3] = self.position
        bins = np.linspace(self.depth_min, self.depth_max, self.depth_bins)
        return CameraModel(
            intrinsics=k,
            cam_to_vehicle=m,
            depth_bins=bins,
            image_size=self.image_hw,
            feature_size=(h // self.feature_stride, w // self.feature_stride),
        )


@dataclass
class BevConfig:
    """Two rasters over one ground-plane window: a coarse grid the encoder
    pools camera features into, and a finer grid for labels/decoding."""

    origin: tuple[float, float] = (-6.0, -12.0)
    feature_shape: tuple[int, int] = (24, 24)
    feature_resolution: float = 1.0
    label_shape: tuple[int, int] = (48, 48)
    label_resolution: float = 0.5
    n_classes: int = 6

    def feature_grid(self) -> BevGridSpec:
        return BevGridSpec(self.feature_shape, self.feature_resolution, self.origin)

    def label_grid(self) -> BevGridSpec:
        return BevGridSpec(self.label_shape, self.label_resolution, self.origin)


@dataclass
class ModelConfig:
    bev_feature_channels: int = 32
    bev_embedding_dim: int = 480
    route_dim: int = 16
    speed_dim: int = 16
    embedding_dim: int = 512
    h_dim: int = 256
    s_dim: int = 64
    action_dim: int = 2
    action_embed_dim: int = 16
    gru_input_dim: int = 128
    prior_hidden: int = 128
    posterior_hidden: int = 256
    policy_hidden: int = 256
    min_stddev: float = 1e-3
    speed_scale: float = 10.0
    predict_instance: bool = True
    bev_decoder_const_hw: tuple[int, int] = (3, 3)
    bev_decoder_const_channels: int = 64
    bev_decoder_channels: tuple[int, ...] = (48, 32, 24, 16)
    image_decoder_const_hw: tuple[int, int] = (4, 6)
    image_decoder_const_channels: int = 32
    image_decoder_channels: tuple[int, ...] = (24, 16, 12, 8)

    def __post_init__(self) -> None:
        if self.bev_embedding_dim + self.route_dim + self.speed_dim != self.embedding_dim:
            raise ValueError(
                "embedding_dim must equal bev_embedding_dim + route_dim + speed_dim"
            )


@dataclass
class SimConfig:
    dt: float = 0.1
    max_steps: int = 600
    record_stride: int = 1
    r_min: float = -1.0
    # vehicle
    wheelbase: float = 2.5
    v_max: float = 8.0
    accel_gain: float = 4.0
    brake_gain: float = 6.0
    steer_max: float = 0.5
    ego_size: tuple[float, float] = (4.0, 1.9)
    # road
    lane_width: float = 3.5
    marking_width: float = 0.4
    center_dash_period: float = 3.0
    center_dash_fill: float = 0.55
    off_route_max: float = 4.0
    # behaviour
    cruise_speed: float = 4.5
    lat_accel_max: float = 2.2
    expert_lookahead_base: float = 2.5
    expert_lookahead_gain: float = 0.7
    expert_stop_margin: float = 2.0
    expert_agent_gap: float = 6.5
    expert_speed_gain: float = 1.2
    comfort_brake: float = 2.5
    # collection-time pose noise for recovery coverage
    disturbance_prob: float = 0.05
    disturbance_heading: float = 0.05
    disturbance_lateral: float = 0.25
    # traffic lights
    red_range: tuple[float, float] = (3.0, 6.0)
    green_range: tuple[float, float] = (5.0, 9.0)
    # reward shaping
    reward_lat_scale: float = 2.0
    reward_speed_frac: float = 0.5
    reward_lat_frac: float = 0.5
    # world population
    max_lights: int = 2
    max_lead: int = 1
    max_oncoming: int = 2
    max_parked: int = 2
    max_peds: int = 2
    crosser_prob: float = 0.35
    palette_pool: str = "train"


@dataclass
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 16
    seq_len: int = 12
    lr: float = 1e-4
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    one_cycle_pct_start: float = 0.2
    grad_clip: float = 100.0
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 1000


@dataclass
class EvalConfig:
    window_s: float = 2.0
    imagine_ratio: float = 0.0
    max_ratio: float = 0.6
    seed_base: int = 1000
    n_seeds: int = 20
    sample_seed: int = 7


@dataclass
class RunConfig:
    camera: CameraConfig = field(default_factory=CameraConfig)
    bev: BevConfig = field(default_factory=BevConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data, path="")

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        data = yaml.safe_load(Path(path).read_text())
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ValueError(f"config root must be a mapping, got {type(data).__name__}")
        return cls.from_dict(data)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _plain(obj):
    """Recursively turn tuples into lists so YAML stays tag-free."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ValueError(f"expected a mapping at '{path or 'root'}'")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        where = path or "root"
        raise ValueError(f"unknown config key(s) {unknown} at '{where}'")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(hint) and isinstance(value, dict):
            kwargs[name] = _build(hint, value, sub)
        else:
            kwargs[name] = _coerce(hint, value)
    return cls(**kwargs)


def _coerce(hint, value):
    origin = typing.get_origin(hint)
    if origin is tuple and isinstance(value, (list, tuple)):
        args = typing.get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v) for v in value)
        if len(args) == len(value):
            return tuple(_coerce(a, v) for a, v in zip(args, value))
        raise ValueError(f"expected {len(args)} entries, got {len(value)}")
    if hint is float and isinstance(value, int):
        return float(value)
    return value
