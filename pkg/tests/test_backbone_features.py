"""Backbone forward pass, MAC pooling, whitening, attention, globals."""

from __future__ import annotations

import numpy as np
import pytest

from ausil.backbone import (
    BackboneConfig,
    backbone_forward,
    infer_config,
    init_backbone,
    layer_names,
)
from ausil.errors import DataError, ModelError
from ausil.features import (
    apply_attention,
    apply_whitening,
    attention_weights,
    clip_mac_matrix,
    fit_pca_whitening,
    global_descriptor,
    mac_pool,
    project,
    refine,
)
from ausil.seeds import stream


class TestBackboneConfig:
    def test_full_scale_mac_dim(self):
        assert BackboneConfig.full_scale().mac_dim == 2528

    def test_desk_scale_mac_dim(self):
        config = BackboneConfig.desk_scale()
        assert config.widths == (2, 2, 4, 4, 8, 8, 16, 16, 32, 32, 64, 128)
        assert config.mac_dim == 316

    def test_twelve_layers(self):
        assert len(layer_names()) == 12
        assert len(set(layer_names())) == 12

    def test_rejects_bad_widths(self):
        with pytest.raises(ValueError):
            BackboneConfig((4, 4))
        with pytest.raises(ValueError):
            BackboneConfig(tuple([4] * 11 + [0]))


class TestBackboneTensors:
    def test_init_layout(self):
        config = BackboneConfig.desk_scale()
        tensors = init_backbone(config, stream(0, "t/init"))
        c_in = 1
        for name, c_out in zip(layer_names(), config.widths):
            assert tensors[f"backbone/{name}/kernel"].shape == (c_out, c_in, 3, 3)
            assert tensors[f"backbone/{name}/bias"].shape == (c_out,)
            assert np.all(tensors[f"backbone/{name}/bn_var"] == 1.0)
            c_in = c_out

    def test_init_deterministic(self):
        a = init_backbone(BackboneConfig.desk_scale(), stream(5, "t/det"))
        b = init_backbone(BackboneConfig.desk_scale(), stream(5, "t/det"))
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_infer_config_round_trip(self):
        config = BackboneConfig.desk_scale()
        tensors = init_backbone(config, stream(1, "t/rt"))
        assert infer_config(tensors) == config

    def test_infer_config_missing_tensor(self):
        tensors = init_backbone(BackboneConfig.desk_scale(), stream(1, "t/miss"))
        del tensors["backbone/b3c1/kernel"]
        with pytest.raises(ModelError, match="missing tensor"):
            infer_config(tensors)

    def test_infer_config_bad_shape(self):
        tensors = init_backbone(BackboneConfig.desk_scale(), stream(1, "t/shape"))
        tensors["backbone/b1c1/kernel"] = np.zeros((2, 1, 5, 5), dtype=np.float32)
        with pytest.raises(ModelError, match="unexpected shape"):
            infer_config(tensors)


@pytest.fixture(scope="module")
def tensors():
    return init_backbone(BackboneConfig.desk_scale(), stream(2, "t/fwd"))


class TestBackboneForward:
    def test_map_shapes_follow_pooling(self, tensors):
        segments = stream(3, "t/seg").normal(size=(2, 172, 128)).astype(np.float32)
        maps = backbone_forward(tensors, segments)
        assert len(maps) == 12
        widths = BackboneConfig.desk_scale().widths
        # spatial extent halves after each of the six pooled layers
        sizes = [(172, 128)] * 2 + [(86, 64)] * 2 + [(43, 32)] * 2
        sizes += [(21, 16)] * 2 + [(10, 8)] * 2 + [(5, 4), (2, 2)]
        for fmap, width, size in zip(maps, widths, sizes):
            assert fmap.shape == (2, width) + size

    def test_outputs_non_negative(self, tensors):
        segments = stream(4, "t/relu").normal(size=(1, 172, 128)).astype(np.float32)
        for fmap in backbone_forward(tensors, segments):
            assert fmap.min() >= 0.0

    def test_deterministic(self, tensors):
        segments = stream(5, "t/det2").normal(size=(1, 172, 128)).astype(np.float32)
        a = backbone_forward(tensors, segments.copy())
        b = backbone_forward(tensors, segments.copy())
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_rejects_non_batch_input(self, tensors):
        with pytest.raises(ValueError):
            backbone_forward(tensors, np.zeros((172, 128), dtype=np.float32))


class TestMacPool:
    def test_hand_example(self):
        # one layer, channels peaking at 3 and 4: normalized to the 3-4-5 triangle
        fmap = np.zeros((1, 2, 2, 2))
        fmap[0, 0] = [[1, 3], [0, 2]]
        fmap[0, 1] = [[4, 1], [2, 0]]
        out = mac_pool([fmap])
        assert out.shape == (1, 2)
        assert out[0] == pytest.approx([0.6, 0.8])

    def test_layer_blocks_normalized_before_concat(self):
        a = np.full((1, 1, 1, 1), 3.0)
        b = np.full((1, 1, 1, 1), 400.0)
        out = mac_pool([a, b])
        # each one-channel block normalizes to 1, so the scale gap vanishes
        assert out[0] == pytest.approx([np.sqrt(0.5), np.sqrt(0.5)])

    def test_all_zero_layer_stays_zero(self):
        live = np.ones((2, 3, 2, 2))
        dead = np.zeros((2, 2, 2, 2))
        out = mac_pool([live, dead])
        assert out.shape == (2, 5)
        assert np.all(out[:, 3:] == 0.0)
        assert np.all(np.isfinite(out))

    def test_unit_rows(self):
        rng = np.random.default_rng(0)
        maps = [np.abs(rng.normal(size=(4, c, 5, 6))) for c in (2, 3, 4)]
        out = mac_pool(maps)
        assert np.linalg.norm(out, axis=1) == pytest.approx(np.ones(4))

    def test_spatial_permutation_invariant(self):
        rng = np.random.default_rng(1)
        maps = [np.abs(rng.normal(size=(2, 3, 4, 5))) for _ in range(2)]
        shuffled = []
        for fmap in maps:
            flat = fmap.reshape(2, 3, -1)
            perm = rng.permutation(flat.shape[2])
            shuffled.append(flat[:, :, perm].reshape(fmap.shape))
        assert np.array_equal(mac_pool(maps), mac_pool(shuffled))


class TestWhitening:
    def correlated_samples(self, n=400, dim=8, seed=0):
        rng = np.random.default_rng(seed)
        mixing = rng.normal(size=(dim, dim))
        return rng.normal(size=(n, dim)) @ mixing + rng.normal(size=dim)

    def test_whitened_covariance_is_identity(self):
        x = self.correlated_samples()
        pca = fit_pca_whitening(x)
        z = project(x, pca)
        cov = np.cov(z, rowvar=False)
        assert np.abs(cov - np.eye(pca.out_dim)).max() < 1e-6
        assert np.abs(z.mean(axis=0)).max() < 1e-9

    def test_reduced_dimension(self):
        x = self.correlated_samples(dim=10)
        pca = fit_pca_whitening(x, out_dim=4)
        assert pca.matrix.shape == (4, 10)
        z = project(x, pca)
        assert np.abs(np.cov(z, rowvar=False) - np.eye(4)).max() < 1e-6

    def test_fit_is_canonical(self):
        x = self.correlated_samples(seed=3)
        a, b = fit_pca_whitening(x), fit_pca_whitening(x.copy())
        assert np.array_equal(a.matrix, b.matrix)
        assert np.array_equal(a.mean, b.mean)

    def test_rank_deficient_sample_stays_finite(self):
        rng = np.random.default_rng(4)
        basis = rng.normal(size=(3, 6))
        x = rng.normal(size=(200, 3)) @ basis  # rank 3 in 6 dims
        pca = fit_pca_whitening(x)
        z = project(x, pca)
        assert np.all(np.isfinite(z))
        cov = np.cov(z, rowvar=False)
        assert np.abs(np.diag(cov)[:3] - 1.0).max() < 1e-6

    def test_insufficient_samples(self):
        with pytest.raises(DataError, match="sample vectors"):
            fit_pca_whitening(np.zeros((5, 8)))

    def test_bad_arguments(self):
        x = self.correlated_samples()
        with pytest.raises(ValueError):
            fit_pca_whitening(x, out_dim=0)
        with pytest.raises(ValueError):
            fit_pca_whitening(x, out_dim=9)
        with pytest.raises(ValueError):
            fit_pca_whitening(np.zeros(8))

    def test_project_checks_dimension(self):
        pca = fit_pca_whitening(self.correlated_samples())
        with pytest.raises(ModelError, match="8-dim"):
            project(np.zeros(7), pca)

    def test_apply_whitening_unit_rows_and_zeros(self):
        x = self.correlated_samples()
        pca = fit_pca_whitening(x)
        out = apply_whitening(x[:10], pca)
        assert np.linalg.norm(out, axis=1) == pytest.approx(np.ones(10))
        # a vector landing exactly at the mean whitens to zero and stays zero
        zero = apply_whitening(pca.mean.copy(), pca)
        assert np.array_equal(zero, np.zeros(8))

    def test_single_vector_round_trip_shape(self):
        x = self.correlated_samples()
        pca = fit_pca_whitening(x)
        assert apply_whitening(x[0], pca).ndim == 1
        assert apply_whitening(x[:3], pca).shape == (3, 8)


class TestAttention:
    def test_weight_extremes(self):
        u = np.array([1.0, 0.0])
        h = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
        assert attention_weights(h, u) == pytest.approx([1.0, 0.0, 0.5])

    def test_weights_bounded_for_unit_inputs(self):
        rng = np.random.default_rng(2)
        u = rng.normal(size=16)
        u /= np.linalg.norm(u)
        h = rng.normal(size=(50, 16))
        h /= np.linalg.norm(h, axis=1, keepdims=True)
        w = attention_weights(h, u)
        assert np.all(w >= 0.0) and np.all(w <= 1.0)

    def test_direction_preserved(self):
        rng = np.random.default_rng(3)
        u = rng.normal(size=8)
        u /= np.linalg.norm(u)
        h = rng.normal(size=(20, 8))
        h /= np.linalg.norm(h, axis=1, keepdims=True)
        out = apply_attention(h, u)
        w = attention_weights(h, u)
        keep = w > 1e-12
        cos = np.sum(out[keep] * h[keep], axis=1) / np.linalg.norm(out[keep], axis=1)
        assert cos == pytest.approx(np.ones(int(keep.sum())))

    def test_scaling_matches_weights(self):
        u = np.array([0.0, 1.0])
        h = np.array([[0.6, 0.8]])
        out = apply_attention(h, u)
        assert out == pytest.approx(h * 0.9)


class TestGlobalDescriptor:
    def test_single_row_returned_unit(self):
        row = np.array([[0.6, 0.8]])
        assert global_descriptor(row) == pytest.approx([0.6, 0.8])

    def test_opposite_rows_cancel_to_zero(self):
        m = np.array([[1.0, 0.0], [-1.0, 0.0]])
        assert np.array_equal(global_descriptor(m), np.zeros(2))

    def test_matches_mean_normalize_oracle(self):
        rng = np.random.default_rng(5)
        m = rng.normal(size=(7, 12))
        mean = m.mean(axis=0)
        assert global_descriptor(m) == pytest.approx(mean / np.linalg.norm(mean))


class TestClipExtraction:
    def test_clip_matrix_shape_and_refine(self, backbone_tensors, small_model):
        from ausil.audio import AudioClip

        rng = np.random.default_rng(6)
        clip = AudioClip(0.1 * rng.normal(size=10 * 44100), 44100, source_id="t")
        mac = clip_mac_matrix(clip, backbone_tensors, 1.0)
        assert mac.shape == (9, 316)  # 9 segments of a 10 s clip at 1 s steps
        assert np.linalg.norm(mac, axis=1) == pytest.approx(np.ones(9))

        refined = refine(mac, small_model.pca, small_model.u)
        assert refined.shape == (9, small_model.pca.out_dim)
        # attention only rescales rows of the whitened matrix
        h = apply_whitening(mac, small_model.pca)
        w = attention_weights(h, small_model.u)
        assert refined == pytest.approx(h * w[:, None])
