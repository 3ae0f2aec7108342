import numpy as np
import pytest
import torch
import torch.nn as nn

from czsl.backbone import (
    BackboneConfig,
    FeatureAligner,
    PAPER_TARGET_CHANNELS,
    StagedBackbone,
    build_backbone,
)
from czsl.errors import ConfigurationError
from oracles import block_mean


def desk(input_size=64, **kw):
    return build_backbone(BackboneConfig(input_size=input_size, **kw))


class TestExtract:
    def test_desk_shapes_64(self):
        bb = desk()
        feats = bb(torch.rand(2, 3, 64, 64))
        assert [tuple(f.shape[1:]) for f in feats] == [
            (32, 16, 16), (64, 8, 8), (128, 4, 4)
        ]

    def test_level_zero_selectable(self):
        bb = desk(levels=(0, 1, 2, 3))
        feats = bb(torch.rand(1, 3, 64, 64))
        assert tuple(feats[0].shape[1:]) == (16, 32, 32)

    def test_zero_image_finite(self):
        feats = desk()(torch.zeros(1, 3, 64, 64))
        for f in feats:
            assert torch.isfinite(f).all()

    def test_wrong_shape_rejected(self):
        bb = desk()
        with pytest.raises(ConfigurationError):
            bb(torch.rand(1, 3, 32, 32))
        with pytest.raises(ConfigurationError):
            bb(torch.rand(1, 1, 64, 64))

    def test_frozen_and_deterministic(self):
        a, b = desk(seed=4), desk(seed=4)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert not pa.requires_grad
            assert torch.equal(pa, pb)
        c = desk(seed=5)
        assert any(
            not torch.equal(pa, pc)
            for pa, pc in zip(a.parameters(), c.parameters())
        )

    def test_external_kind_same_contract(self):
        stages = [
            nn.Sequential(nn.Conv2d(c_in, c_out, 3, 2, 1), nn.ReLU())
            for c_in, c_out in zip((3, 4, 8, 12), (4, 8, 12, 16))
        ]
        config = BackboneConfig(kind="external", input_size=32,
                                stage_channels=(4, 8, 12, 16))
        bb = build_backbone(config, stages=stages)
        feats = bb(torch.rand(1, 3, 32, 32))
        assert [f.shape[1] for f in feats] == [8, 12, 16]
        assert all(not p.requires_grad for p in bb.parameters())
        with pytest.raises(ConfigurationError):
            build_backbone(config)  # stages required


class TestAlign:
    def test_level3_identity_conv_is_flatten(self):
        torch.manual_seed(0)
        aligner = FeatureAligner((32, 64, 128), 128, grid=4)
        with torch.no_grad():
            aligner.convs[2].weight.copy_(
                torch.eye(128).reshape(128, 128, 1, 1)
            )
            aligner.convs[2].bias.zero_()
        feats = [torch.rand(2, 32, 16, 16), torch.rand(2, 64, 8, 8),
                 torch.rand(2, 128, 4, 4)]
        rows = aligner(feats)
        assert torch.equal(rows[:, 2].detach(), feats[2].flatten(1))

    def test_pooling_matches_block_mean_oracle(self):
        torch.manual_seed(1)
        # single level, channel count equals target so the conv can be identity
        aligner = FeatureAligner((8,), 8, grid=4).double()
        with torch.no_grad():
            aligner.convs[0].weight.copy_(torch.eye(8).reshape(8, 8, 1, 1))
            aligner.convs[0].bias.zero_()
        f = torch.rand(1, 8, 16, 16, dtype=torch.float64)
        rows = aligner([f]).detach().reshape(8, 4, 4)
        for c in range(8):
            expected = block_mean(f[0, c].numpy(), 4, 4)
            np.testing.assert_allclose(rows[c].numpy(), expected, atol=1e-12)

    def test_constant_input_closed_form(self):
        torch.manual_seed(2)
        aligner = FeatureAligner((5,), 7, grid=2).double()
        v = 0.37
        f = torch.full((1, 5, 8, 8), v, dtype=torch.float64)
        rows = aligner([f]).detach().reshape(7, 2, 2)
        w = aligner.convs[0].weight.detach()  # (7,5,1,1)
        b = aligner.convs[0].bias.detach()
        expected = v * w.sum(dim=(1, 2, 3)) + b
        for c in range(7):
            np.testing.assert_allclose(rows[c].numpy(), expected[c].item(),
                                       rtol=1e-10)

    def test_linearity(self):
        torch.manual_seed(3)
        aligner = FeatureAligner((6, 12), 8, grid=4).double()
        # drop the affine offset so align is strictly linear
        with torch.no_grad():
            for conv in aligner.convs:
                conv.bias.zero_()
        def feats(gen_seed):
            g = torch.Generator().manual_seed(gen_seed)
            return [torch.rand(2, 6, 8, 8, generator=g, dtype=torch.float64),
                    torch.rand(2, 12, 4, 4, generator=g, dtype=torch.float64)]
        fx, fy = feats(10), feats(11)
        a, b = 1.7, -0.4
        mixed = [a * x + b * y for x, y in zip(fx, fy)]
        lhs = aligner(mixed)
        rhs = a * aligner(fx) + b * aligner(fy)
        assert (lhs - rhs).abs().max() / rhs.abs().max() < 1e-5

    def test_gradients_reach_aligned_rows_not_backbone(self):
        bb = desk(input_size=32, stage_channels=(4, 8, 12, 16))
        aligner = FeatureAligner((8, 12, 16), 8, grid=2)
        x = torch.rand(2, 3, 32, 32)
        rows = aligner(bb(x))
        grads = torch.autograd.grad(rows.sum(), list(aligner.parameters()))
        assert all(g.abs().sum() > 0 for g in grads)
        # backbone stages hold no gradient path at all
        assert all(not p.requires_grad for p in bb.parameters())

    def test_paper_scale_channel_target(self):
        aligner = FeatureAligner((32, 64, 128), PAPER_TARGET_CHANNELS, grid=4)
        feats = [torch.rand(1, 32, 16, 16), torch.rand(1, 64, 8, 8),
                 torch.rand(1, 128, 4, 4)]
        rows = aligner(feats)
        assert rows.shape == (1, 3, 512 * 16)

    def test_level_count_mismatch_rejected(self):
        aligner = FeatureAligner((8, 16), 8, grid=2)
        with pytest.raises(ConfigurationError):
            aligner([torch.rand(1, 8, 4, 4)])


class TestConfig:
    def test_bad_settings_rejected(self):
        with pytest.raises(ConfigurationError):
            BackboneConfig(kind="vit")
        with pytest.raises(ConfigurationError):
            BackboneConfig(levels=())
        with pytest.raises(ConfigurationError):
            BackboneConfig(levels=(4,))
        with pytest.raises(ConfigurationError):
            BackboneConfig(input_size=8)

    def test_grid_size(self):
        config = BackboneConfig(input_size=64)
        assert config.grid_size() == 4
        assert config.grid_size(level=1) == 16
