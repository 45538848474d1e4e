"""Spatial decoders and policy head: sizes, modulation, value ranges."""

from __future__ import annotations

import pytest
import torch
from conftest import micro_run_config

from latentdrive.decoders import (
    AdaInDecoder,
    AdaptiveInstanceNorm,
    BevDecoder,
    ImageDecoder,
    PolicyHead,
)


@pytest.fixture
def micro_model_cfg():
    return micro_run_config().model


class TestAdaptiveInstanceNorm:
    def test_matches_manual_normalisation(self):
        torch.manual_seed(0)
        mod = AdaptiveInstanceNorm(channels=5, z_dim=7).double()
        x = torch.randn(3, 5, 4, 6, dtype=torch.float64)
        z = torch.randn(3, 7, dtype=torch.float64)
        mean = x.mean(dim=(-2, -1), keepdim=True)
        var = x.var(dim=(-2, -1), keepdim=True, unbiased=False)
        normed = (x - mean) / torch.sqrt(var + 1e-5)
        scale, shift = mod.affine(z).chunk(2, dim=-1)
        want = normed * (1.0 + scale[..., None, None]) + shift[..., None, None]
        torch.testing.assert_close(mod(x, z), want)

    def test_z_modulates_output(self):
        torch.manual_seed(1)
        mod = AdaptiveInstanceNorm(channels=4, z_dim=6)
        x = torch.randn(2, 4, 8, 8)
        z1, z2 = torch.randn(2, 6), torch.randn(2, 6)
        assert not torch.allclose(mod(x, z1), mod(x, z2))


class TestAdaInDecoder:
    def test_output_size_formula(self):
        torch.manual_seed(0)
        dec = AdaInDecoder(
            z_dim=10, const_channels=8, const_hw=(3, 5), stage_channels=(6, 4, 4), out_channels=2
        )
        out = dec(torch.randn(2, 10))
        assert out.shape == (2, 2, 3 * 8, 5 * 8)

    def test_rejects_empty_stages(self):
        with pytest.raises(ValueError):
            AdaInDecoder(z_dim=4, const_channels=4, const_hw=(2, 2), stage_channels=(), out_channels=1)

    def test_leading_dims(self):
        torch.manual_seed(0)
        dec = AdaInDecoder(z_dim=5, const_channels=4, const_hw=(2, 2), stage_channels=(4,), out_channels=3)
        z = torch.randn(2, 3, 5)
        out = dec(z)
        assert out.shape == (2, 3, 3, 4, 4)
        torch.testing.assert_close(out.reshape(6, 3, 4, 4), dec(z.reshape(6, 5)))

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(2)
        dec = AdaInDecoder(
            z_dim=6, const_channels=4, const_hw=(2, 2), stage_channels=(4,), out_channels=2
        ).double()
        z = torch.randn(1, 6, dtype=torch.float64, requires_grad=True)
        probe = torch.randn(2, 4, 4, dtype=torch.float64)
        (dec(z) * probe).sum().backward()
        eps = 1e-6
        for i in range(6):
            zp = z.detach().clone()
            zm = z.detach().clone()
            zp[0, i] += eps
            zm[0, i] -= eps
            fd = ((dec(zp) * probe).sum() - (dec(zm) * probe).sum()).item() / (2 * eps)
            got = z.grad[0, i].item()
            assert abs(fd - got) <= 1e-5 * max(1.0, abs(fd)), (i, fd, got)


class TestBevDecoder:
    def test_instance_channels(self, micro_model_cfg):
        torch.manual_seed(0)
        dec = BevDecoder(micro_model_cfg, n_classes=6)
        h = torch.randn(4, micro_model_cfg.h_dim)
        s = torch.randn(4, micro_model_cfg.s_dim)
        out = dec(h, s)
        assert out.logits.shape == (4, 6, 16, 16)
        assert out.center.shape == (4, 1, 16, 16)
        assert out.offset.shape == (4, 2, 16, 16)
        assert (out.center >= 0).all() and (out.center <= 1).all()

    def test_instance_head_optional(self, micro_model_cfg):
        micro_model_cfg.predict_instance = False
        torch.manual_seed(0)
        dec = BevDecoder(micro_model_cfg, n_classes=6)
        out = dec(torch.randn(2, micro_model_cfg.h_dim), torch.randn(2, micro_model_cfg.s_dim))
        assert out.logits.shape == (2, 6, 16, 16)
        assert out.center is None and out.offset is None

    def test_latent_modulates_prediction(self, micro_model_cfg):
        torch.manual_seed(0)
        dec = BevDecoder(micro_model_cfg, n_classes=6)
        h = torch.randn(1, micro_model_cfg.h_dim)
        s1 = torch.randn(1, micro_model_cfg.s_dim)
        s2 = torch.randn(1, micro_model_cfg.s_dim)
        assert not torch.allclose(dec(h, s1).logits, dec(h, s2).logits)


class TestImageDecoder:
    def test_shape_and_range(self, micro_model_cfg):
        torch.manual_seed(0)
        dec = ImageDecoder(micro_model_cfg)
        out = dec(torch.randn(3, micro_model_cfg.h_dim), torch.randn(3, micro_model_cfg.s_dim))
        assert out.shape == (3, 3, 16, 24)
        assert (out >= 0).all() and (out <= 1).all()


class TestPolicyHead:
    def test_shape_and_squash(self, micro_model_cfg):
        torch.manual_seed(0)
        pol = PolicyHead(micro_model_cfg)
        h = torch.randn(64, micro_model_cfg.h_dim) * 10.0
        s = torch.randn(64, micro_model_cfg.s_dim) * 10.0
        a = pol(h, s)
        assert a.shape == (64, micro_model_cfg.action_dim)
        assert (a > -1.0).all() and (a < 1.0).all()
