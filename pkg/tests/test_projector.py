"""Token compressor contracts: geometry, degeneracies, confinement."""

from __future__ import annotations

import numpy as np
import pytest

from anomseg import projector as prj
from anomseg.encoders import MultiLevelFeatures
from anomseg.errors import ParameterError, ShapeError
from anomseg.numcore import Tensor, functional as F, grad_check


def make_feats(rng, batch=1, side=8, width=16, levels=6):
    data = [Tensor(rng.normal(size=(batch, side * side, width)))
            for _ in range(levels)]
    return MultiLevelFeatures(data)


def make_compressor(rng, side=8, width=16, levels=6, lm_width=24, **cfg_kw):
    cfg = prj.CompressorConfig(**cfg_kw) if cfg_kw else prj.CompressorConfig()
    return prj.TokenCompressor(rng, side, width, levels, lm_width, cfg)


class TestGeometry:

    @pytest.mark.parametrize("side,rho", [(8, 2), (8, 4), (6, 3), (4, 1)])
    def test_token_count_is_exact_quotient(self, rng, side, rho):
        comp = make_compressor(rng, side=side, rho=rho, fuse_levels=2)
        feats = make_feats(rng, side=side)
        tokens = comp.project(feats)
        n = side * side
        assert tokens.shape[1] == n // rho ** 2
        assert comp.num_tokens * rho ** 2 == n

    def test_projected_width_is_lm_width(self, rng):
        comp = make_compressor(rng, lm_width=24)
        out = comp.project(make_feats(rng))
        assert out.shape == (1, 16, 24)

    def test_indivisible_rho_rejected(self, rng):
        with pytest.raises(ParameterError):
            make_compressor(rng, side=8, rho=3)

    def test_fuse_levels_cap(self, rng):
        with pytest.raises(ParameterError):
            make_compressor(rng, levels=4, fuse_levels=3)   # cap is L - 2 = 2

    def test_fused_level_range_precedes_last(self, rng):
        comp = make_compressor(rng, levels=6, fuse_levels=4)
        assert list(comp.fused_level_range()) == [1, 2, 3, 4]


class TestDeformableSampler:

    def test_zero_offsets_equal_strided_reference_bitwise(self, rng):
        side, width, taps, stride = 6, 8, 4, 1
        layer = prj.DeformableSampler(rng, side, width, taps=taps, stride=stride)
        x = rng.normal(size=(2, side * side, width))
        out = layer(Tensor(x))

        base = prj.tap_offsets(taps)
        rows, cols = np.divmod(np.arange(side * side), side)
        pts = np.stack([rows, cols], -1)[:, None, :] + stride * base[None]
        ri = np.clip(pts[..., 0], 0, side - 1).astype(int)
        ci = np.clip(pts[..., 1], 0, side - 1).astype(int)
        grid = x.reshape(2, side, side, width)
        gathered = grid[:, ri, ci]                       # [B, N, K, C]
        ref = gathered.reshape(2, side * side, taps * width) @ layer.mix.data
        ref = ref + layer.mix_bias.data
        assert out.data.tobytes() == ref.tobytes()

    def test_stride_two_changes_receptive_field(self, rng):
        side, width = 6, 4
        x = rng.normal(size=(1, side * side, width))
        s1 = prj.DeformableSampler(rng, side, width, taps=4, stride=1)
        s2 = prj.DeformableSampler(rng, side, width, taps=4, stride=2)
        s2.mix.data = s1.mix.data.copy()
        s2.mix_bias.data = s1.mix_bias.data.copy()
        assert np.abs(s1(Tensor(x)).data - s2(Tensor(x)).data).max() > 1e-8

    def test_learned_offsets_receive_gradient(self, rng):
        side, width = 4, 4
        layer = prj.DeformableSampler(rng, side, width, taps=4)
        # nudge the head away from zero so point gradients are live
        layer.offset_head.weight.data += rng.normal(0, 0.05,
                                                    layer.offset_head.weight.shape)
        x = Tensor(rng.normal(size=(1, 16, width)), requires_grad=True)
        layer(x).sum().backward()
        assert layer.offset_head.weight.grad is not None
        assert np.abs(layer.offset_head.weight.grad).max() > 0

    def test_tap_offset_layouts(self):
        np.testing.assert_array_equal(prj.tap_offsets(1), [[0, 0]])
        np.testing.assert_array_equal(prj.tap_offsets(4),
                                      [[0, 0], [0, 1], [1, 0], [1, 1]])
        assert prj.tap_offsets(3).shape == (3, 2)


class TestLearner:

    def test_constant_tokens_stay_constant(self, rng):
        comp = make_compressor(rng, side=4, width=8, levels=3, fuse_levels=1)
        x = Tensor(np.tile(rng.normal(size=8), (1, 16, 1)))
        for block in comp.learner:
            x = block(x)
        row0 = x.data[0, 0]
        assert np.array_equal(x.data[0], np.tile(row0, (16, 1)))


class TestSpatialDownsampler:

    def test_rho1_identity_configuration(self, rng):
        down = prj.SpatialDownsampler(rng, grid_side=4, width=8, rho=1, blocks=2)
        x = Tensor(rng.normal(size=(2, 16, 8)))
        out = down(x)
        np.testing.assert_array_equal(out.data, x.data)

    def test_constant_input_constant_output(self, rng):
        down = prj.SpatialDownsampler(rng, grid_side=4, width=8, rho=2, blocks=1)
        x = Tensor(np.tile(rng.normal(size=8), (1, 16, 1)))
        out = down(x)
        assert out.shape == (1, 4, 8)
        assert np.allclose(out.data, out.data[0, 0], atol=1e-12)


class TestCoarseToFine:

    def test_region_confinement_is_exact(self, rng):
        side, width, rho = 8, 8, 2
        layer = prj.CoarseToFine(rng, side, width, rho, attn_dim=width)
        coarse = Tensor(rng.normal(size=(1, (side // rho) ** 2, width)))
        fine = rng.normal(size=(1, side * side, width))
        query = 5
        region = set(layer.regions[query].tolist())
        outside = np.array([i for i in range(side * side) if i not in region])

        base = layer(coarse, Tensor(fine)).data[0, query]
        zeroed = fine.copy()
        zeroed[0, outside] = 0.0
        after = layer(coarse, Tensor(zeroed)).data[0, query]
        assert base.tobytes() == after.tobytes()

    def test_rho1_returns_value_projection_of_own_cell(self, rng):
        side, width = 4, 6
        layer = prj.CoarseToFine(rng, side, width, rho=1, attn_dim=width)
        coarse = Tensor(rng.normal(size=(1, 16, width)))
        fine = Tensor(rng.normal(size=(1, 16, width)))
        out = layer(coarse, fine)
        expected = layer.wv(fine)
        np.testing.assert_allclose(out.data, expected.data, atol=1e-12)

    def test_attention_weights_sum_to_one(self, rng):
        side, width, rho = 4, 6, 2
        layer = prj.CoarseToFine(rng, side, width, rho, attn_dim=4)
        coarse = Tensor(rng.normal(size=(2, 4, width)))
        fine = Tensor(rng.normal(size=(2, 16, width)))
        q = layer.wq(coarse).reshape((2, 4, -1, 1))
        fine_t = fine.transpose((1, 0, 2))
        gathered = F.take_rows(fine_t, layer.regions).transpose((2, 0, 1, 3))
        scores = (layer.wk(gathered) @ q) * layer.scale
        att = F.softmax(scores, axis=2)
        np.testing.assert_allclose(att.data.sum(axis=2), 1.0, atol=1e-9)

    def test_region_indices_partition_the_grid(self):
        regions = prj.region_indices(8, 2)
        assert regions.shape == (16, 4)
        flat = np.sort(regions.reshape(-1))
        np.testing.assert_array_equal(flat, np.arange(64))


class TestFusionResidual:

    def test_zero_init_fusion_keeps_downsampled_tokens(self, rng):
        comp = make_compressor(rng)
        feats = make_feats(rng)
        coarse = comp.downsample(comp.refine_last(feats))
        compressed = comp.compress(feats)
        assert compressed.data.tobytes() == coarse.data.tobytes()

    def test_averaging_fusion_recovers_shared_input(self, rng):
        comp = make_compressor(rng, side=4, width=8, levels=4, fuse_levels=2)
        m = comp.num_tokens
        shared = Tensor(rng.normal(size=(1, m, 8)))
        n = comp.cfg.fuse_levels
        eye = np.eye(8) / n
        comp.fusion.weight.data = np.vstack([eye] * n)
        fused = comp.fusion(F.concat([shared] * n, axis=-1))
        np.testing.assert_allclose(fused.data, shared.data, atol=1e-12)

    def test_trained_fusion_changes_output(self, rng):
        comp = make_compressor(rng)
        comp.fusion.weight.data = rng.normal(0, 0.1, comp.fusion.weight.shape)
        feats = make_feats(rng)
        coarse = comp.downsample(comp.refine_last(feats))
        compressed = comp.compress(feats)
        assert np.abs(compressed.data - coarse.data).max() > 1e-6


class TestPooledProjector:

    def test_same_geometry_as_compressor(self, rng):
        cfg = prj.CompressorConfig(rho=2, fuse_levels=2)
        full = prj.TokenCompressor(rng, 8, 16, 6, 24, cfg)
        mlp = prj.PooledProjector(rng, 8, 16, 6, 24,
                                  prj.CompressorConfig(rho=2, fuse_levels=2))
        feats = make_feats(rng)
        assert mlp.project(feats).shape == full.project(feats).shape


class TestDifferentiability:

    def test_grad_check_through_full_projection(self, rng):
        comp = make_compressor(rng, side=4, width=4, levels=3, lm_width=4,
                               rho=2, learner_blocks=1, taps=4, fuse_levels=1)
        # move the offset head off its zero init so its path is exercised
        comp.learner[0].deform.offset_head.weight.data += rng.normal(
            0, 0.05, comp.learner[0].deform.offset_head.weight.shape)
        fixed = [Tensor(rng.normal(size=(1, 16, 4))) for _ in range(2)]

        def run(last, fused):
            feats = MultiLevelFeatures([fixed[0], fused, last])
            return (comp.project(feats) * comp.project(feats)).sum()

        last = Tensor(rng.normal(size=(1, 16, 4)))
        fused = Tensor(rng.normal(size=(1, 16, 4)))
        report = grad_check(run, [last, fused])
        assert report.passed, str(report)
