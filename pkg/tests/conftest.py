"""Shared fixtures: a micro model configuration plus synthetic batches.

The micro config keeps every constructor constraint of the full one (embedding
split, decoder output sizes matching the grids, stride-8 backbone) while being
small enough for per-test forward/backward passes.
"""

from __future__ import annotations

import numpy as np
import pytest
import torch

from latentdrive.config import BevConfig, CameraConfig, ModelConfig, RunConfig
from latentdrive.data import FrameBatch


def micro_run_config() -> RunConfig:
    return RunConfig(
        camera=CameraConfig(image_hw=(16, 24), feature_stride=8, depth_bins=6),
        bev=BevConfig(
            feature_shape=(8, 8),
            feature_resolution=3.0,
            label_shape=(16, 16),
            label_resolution=1.5,
        ),
        model=ModelConfig(
            bev_feature_channels=8,
            bev_embedding_dim=24,
            route_dim=4,
            speed_dim=4,
            embedding_dim=32,
            h_dim=16,
            s_dim=8,
            action_embed_dim=4,
            gru_input_dim=8,
            prior_hidden=8,
            posterior_hidden=16,
            policy_hidden=16,
            bev_decoder_const_hw=(4, 4),
            bev_decoder_const_channels=16,
            bev_decoder_channels=(12, 8),
            image_decoder_const_hw=(4, 6),
            image_decoder_const_channels=8,
            image_decoder_channels=(8, 6),
        ),
    )


@pytest.fixture
def micro_cfg() -> RunConfig:
    return micro_run_config()


def synthetic_batch(
    cfg: RunConfig, b: int, t: int, seed: int = 0, instance: bool = True
) -> FrameBatch:
    rng = np.random.default_rng(seed)
    h, w = cfg.camera.image_hw
    hb, wb = cfg.bev.label_shape

    def f32(a: np.ndarray) -> torch.Tensor:
        return torch.from_numpy(a.astype(np.float32))

    return FrameBatch(
        images=f32(rng.uniform(0.0, 1.0, size=(b, t, 3, h, w))),
        routes=f32(rng.uniform(0.0, 1.0, size=(b, t, 1, hb, wb))),
        speeds=f32(rng.uniform(0.0, 8.0, size=(b, t))),
        actions=f32(rng.uniform(-1.0, 1.0, size=(b, t, 2))),
        bev_labels=torch.from_numpy(rng.integers(0, cfg.bev.n_classes, size=(b, t, hb, wb))),
        centers=f32(rng.uniform(0.0, 1.0, size=(b, t, 1, hb, wb))) if instance else None,
        offsets=f32(rng.normal(size=(b, t, 2, hb, wb))) if instance else None,
    )
