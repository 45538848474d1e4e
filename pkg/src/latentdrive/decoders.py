"""Decoders and policy head, all conditioned on the latent (h, s) pair.

The spatial decoders grow a learned constant tensor by nearest-neighbour
upsampling + 3x3 conv stages; every stage is modulated by adaptive instance
normalisation whose scale and shift are affine in [h, s].  The BeV head
emits segmentation logits plus optional instance centre/offset channels,
the image head emits RGB in [0, 1], and the policy is a small MLP with a
tanh squash onto [-1, 1]^2.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig


class AdaptiveInstanceNorm(nn.Module):
    """Instance-normalise the map, then scale/shift per channel from z."""

    def __init__(self, channels: int, z_dim: int) -> None:
        super().__init__()
        self.affine = nn.Linear(z_dim, 2 * channels)
        self.norm = nn.InstanceNorm2d(channels, affine=False)

    def forward(self, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        scale, shift = self.affine(z).chunk(2, dim=-1)
        return self.norm(x) * (1.0 + scale[..., None, None]) + shift[..., None, None]


class AdaInDecoder(nn.Module):
    """Learned constant -> (n stages of up2x, conv3x3, AdaIN, ELU) -> 1x1 head.

    Output spatial size is const_hw * 2**len(stage_channels).
    """

    def __init__(
        self,
        z_dim: int,
        const_channels: int,
        const_hw: tuple[int, int],
        stage_channels: tuple[int, ...],
        out_channels: int,
    ) -> None:
        super().__init__()
        if not stage_channels:
            raise ValueError("need at least one upsampling stage")
        self.const = nn.Parameter(torch.randn(const_channels, *const_hw) * 0.1)
        self.adain_in = AdaptiveInstanceNorm(const_channels, z_dim)
        convs, adains = [], []
        prev = const_channels
        for ch in stage_channels:
            convs.append(nn.Conv2d(prev, ch, kernel_size=3, padding=1))
            adains.append(AdaptiveInstanceNorm(ch, z_dim))
            prev = ch
        self.convs = nn.ModuleList(convs)
        self.adains = nn.ModuleList(adains)
        self.head = nn.Conv2d(prev, out_channels, kernel_size=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        lead = z.shape[:-1]
        zf = z.reshape(-1, z.shape[-1])
        x = self.const.unsqueeze(0).expand(zf.shape[0], -1, -1, -1)
        x = self.adain_in(x, zf)
        for conv, adain in zip(self.convs, self.adains):
            x = nn.functional.interpolate(x, scale_factor=2.0, mode="nearest")
            x = nn.functional.elu(adain(conv(x), zf))
        out = self.head(x)
        return out.reshape(lead + out.shape[-3:])


@dataclass
class BevPrediction:
    """Segmentation logits (..., C, H, W); instance channels when enabled:
    centre heatmap (..., 1, H, W) in [0, 1] and centroid offsets (..., 2, H, W)."""

    logits: torch.Tensor
    center: torch.Tensor | None = None
    offset: torch.Tensor | None = None


class BevDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig, n_classes: int) -> None:
        super().__init__()
        self.n_classes = n_classes
        self.predict_instance = cfg.predict_instance
        out = n_classes + (3 if cfg.predict_instance else 0)
        self.net = AdaInDecoder(
            z_dim=cfg.h_dim + cfg.s_dim,
            const_channels=cfg.bev_decoder_const_channels,
            const_hw=cfg.bev_decoder_const_hw,
            stage_channels=cfg.bev_decoder_channels,
            out_channels=out,
        )

    def forward(self, h: torch.Tensor, s: torch.Tensor) -> BevPrediction:
        raw = self.net(torch.cat([h, s], dim=-1))
        if not self.predict_instance:
            return BevPrediction(logits=raw)
        logits = raw[..., : self.n_classes, :, :]
        center = torch.sigmoid(raw[..., self.n_classes : self.n_classes + 1, :, :])
        offset = raw[..., self.n_classes + 1 :, :, :]
        return BevPrediction(logits=logits, center=center, offset=offset)


class ImageDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.net = AdaInDecoder(
            z_dim=cfg.h_dim + cfg.s_dim,
            const_channels=cfg.image_decoder_const_channels,
            const_hw=cfg.image_decoder_const_hw,
            stage_channels=cfg.image_decoder_channels,
            out_channels=3,
        )

    def forward(self, h: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(torch.cat([h, s], dim=-1)))


class PolicyHead(nn.Module):
    """(h, s) -> action in [-1, 1]^action_dim."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        hid = cfg.policy_hidden
        self.net = nn.Sequential(
            nn.Linear(cfg.h_dim + cfg.s_dim, hid),
            nn.ELU(),
            nn.Linear(hid, hid),
            nn.ELU(),
            nn.Linear(hid, cfg.action_dim),
        )

    def forward(self, h: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.net(torch.cat([h, s], dim=-1)))
