"""Observation encoder: camera frame + route map + speed -> one embedding.

The image runs through a small stride-8 convnet producing per-cell features
and a softmax depth distribution; the features are lifted onto the camera
frustum, sum-pooled into a metric BeV raster, and compressed to a vector in
BeV space.  Route map and speed contribute small embeddings that are
concatenated on the end.
"""

from __future__ import annotations

import torch
from torch import nn

from .config import ModelConfig
from .geometry import BevGridSpec, CameraModel, lift, pool_to_bev


def _conv_stack(channels: list[int], strides: list[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for c_in, c_out, s in zip(channels[:-1], channels[1:], strides):
        layers.append(nn.Conv2d(c_in, c_out, kernel_size=3, stride=s, padding=1))
        layers.append(nn.ELU())
    return nn.Sequential(*layers)


class ObservationEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, camera: CameraModel, feature_grid: BevGridSpec) -> None:
        super().__init__()
        self.cfg = cfg
        self.camera = camera
        self.feature_grid = feature_grid
        c = cfg.bev_feature_channels
        self.backbone = _conv_stack([3, 16, 24, 32, 32], [2, 2, 2, 1])
        self.feature_head = nn.Conv2d(32, c, kernel_size=1)
        self.depth_head = nn.Conv2d(32, camera.num_depth_bins, kernel_size=1)
        self.bev_compress = nn.Sequential(
            _conv_stack([c, 48, 64, 96], [2, 2, 2]),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(-3),
            nn.Linear(96, cfg.bev_embedding_dim),
        )
        self.route_net = nn.Sequential(
            _conv_stack([1, 8, 16, 16], [2, 2, 2]),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(-3),
            nn.Linear(16, cfg.route_dim),
        )
        self.speed_net = nn.Sequential(
            nn.Linear(1, cfg.speed_dim), nn.ELU(), nn.Linear(cfg.speed_dim, cfg.speed_dim)
        )

    def encode_image(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(..., 3, H, W) -> features (..., C_e, H_e, W_e) and a per-cell
        depth distribution (..., D, H_e, W_e) normalised over bins."""
        lead = image.shape[:-3]
        trunk = self.backbone(image.reshape(-1, *image.shape[-3:]))
        feats = self.feature_head(trunk)
        depth = self.depth_head(trunk).softmax(dim=-3)
        return (
            feats.reshape(lead + feats.shape[-3:]),
            depth.reshape(lead + depth.shape[-3:]),
        )

    def bev_features(self, image: torch.Tensor) -> torch.Tensor:
        """Image -> pooled BeV feature raster (..., C_e, n_x, n_y)."""
        feats, depth = self.encode_image(image)
        return pool_to_bev(lift(feats, depth, self.camera), self.feature_grid)

    def compress_bev(self, bev: torch.Tensor) -> torch.Tensor:
        """(..., C_e, n_x, n_y) -> (..., bev_embedding_dim)."""
        lead = bev.shape[:-3]
        out = self.bev_compress(bev.reshape(-1, *bev.shape[-3:]))
        return out.reshape(lead + out.shape[-1:])

    def encode_route(self, route: torch.Tensor) -> torch.Tensor:
        lead = route.shape[:-3]
        out = self.route_net(route.reshape(-1, *route.shape[-3:]))
        return out.reshape(lead + out.shape[-1:])

    def encode_speed(self, speed: torch.Tensor) -> torch.Tensor:
        """(...,) speed in m/s -> (..., speed_dim)."""
        return self.speed_net(speed.unsqueeze(-1) / self.cfg.speed_scale)

    def forward(self, image: torch.Tensor, route: torch.Tensor, speed: torch.Tensor) -> torch.Tensor:
        parts = [
            self.compress_bev(self.bev_features(image)),
            self.encode_route(route),
            self.encode_speed(speed),
        ]
        return torch.cat(parts, dim=-1)

    def encode_observation(self, frame) -> torch.Tensor:
        """Single ObservationFrame -> (embedding_dim,) tensor."""
        p = self.feature_head.weight
        image = torch.as_tensor(frame.image, dtype=p.dtype, device=p.device)
        route = torch.as_tensor(frame.route, dtype=p.dtype, device=p.device)
        speed = torch.as_tensor(float(frame.speed), dtype=p.dtype, device=p.device)
        return self.forward(image, route, speed)
