"""World model: encoder, latent dynamics, decoders and policy in one module."""

from __future__ import annotations

import torch
from torch import nn

from .config import RunConfig
from .decoders import BevDecoder, BevPrediction, ImageDecoder, PolicyHead
from .dynamics import LatentDynamics
from .encoder import ObservationEncoder
from .geometry import BevGridSpec, CameraModel


class WorldModel(nn.Module):
    def __init__(
        self,
        cfg: RunConfig,
        camera: CameraModel | None = None,
        feature_grid: BevGridSpec | None = None,
        label_grid: BevGridSpec | None = None,
    ) -> None:
        super().__init__()
        self.cfg = cfg
        self.camera = camera if camera is not None else cfg.camera.build()
        self.feature_grid = feature_grid if feature_grid is not None else cfg.bev.feature_grid()
        self.label_grid = label_grid if label_grid is not None else cfg.bev.label_grid()
        m = cfg.model
        self.encoder = ObservationEncoder(m, self.camera, self.feature_grid)
        self.dynamics = LatentDynamics(
            h_dim=m.h_dim,
            s_dim=m.s_dim,
            action_dim=m.action_dim,
            embedding_dim=m.embedding_dim,
            action_embed_dim=m.action_embed_dim,
            gru_input_dim=m.gru_input_dim,
            prior_hidden=m.prior_hidden,
            posterior_hidden=m.posterior_hidden,
            min_stddev=m.min_stddev,
        )
        self.bev_decoder = BevDecoder(m, n_classes=cfg.bev.n_classes)
        self.image_decoder = ImageDecoder(m)
        self.policy = PolicyHead(m)

        expect = self.label_grid.shape
        got_hw = (
            m.bev_decoder_const_hw[0] * 2 ** len(m.bev_decoder_channels),
            m.bev_decoder_const_hw[1] * 2 ** len(m.bev_decoder_channels),
        )
        if got_hw != tuple(expect):
            raise ValueError(f"BeV decoder produces {got_hw}, label grid wants {tuple(expect)}")

    def decode_bev(self, h: torch.Tensor, s: torch.Tensor) -> BevPrediction:
        return self.bev_decoder(h, s)

    def decode_image(self, h: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        return self.image_decoder(h, s)

    def predict_action(self, h: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        return self.policy(h, s)

    @property
    def device(self) -> torch.device:
        return next(self.parameters()).device

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
