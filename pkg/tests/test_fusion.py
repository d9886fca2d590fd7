import numpy as np
import pytest

from meatkit.correspondence import CorrespondenceTable
from meatkit.errors import (
    EmptyKeySet,
    MeatkitError,
    NoMatchingScale,
    NonDivisibleResolution,
    ShapeMismatch,
)
from meatkit.fusion import (
    AttentionParams,
    FeatureStack,
    FusionStats,
    KeypointEncoder,
    MeatBlockParams,
    MultiScaleFeatures,
    attention,
    dense_mv_fuse,
    encode_reference_latent,
    epipolar_fuse,
    keypoint_encode,
    meat_block,
    meat_feat,
    meat_vae,
    per_view_self_attention,
    _softmax_rows,
)

from conftest import random_table
from oracles import oracle_attention, oracle_dense_fuse


def stack(rng, n=3, c=8, s=4):
    return FeatureStack(data=rng.standard_normal((n, c, s, s)).astype(np.float32), view_ids=tuple(range(n)))


def embeddings(rng, n, e=27):
    return rng.standard_normal((n, e)).astype(np.float32)


class TestAttention:
    def test_singleton_returns_value(self):
        out = attention([0.3, -2.0], [[1.0, 5.0]], [[3.0, -1.0]])
        assert np.allclose(out, (3, -1))

    def test_equal_logits_average(self):
        out = attention([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]])
        assert np.allclose(out, (0.5, 0.5), atol=1e-6)

    def test_empty_keys(self):
        with pytest.raises(EmptyKeySet):
            attention([1.0], np.zeros((0, 1)), np.zeros((0, 1)))

    def test_matches_pure_python_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            d = int(rng.integers(2, 6))
            k = int(rng.integers(1, 7))
            q = rng.normal(0, 1, d)
            keys = rng.normal(0, 1, (k, d))
            vals = rng.normal(0, 1, (k, d))
            expect = oracle_attention(list(q), keys.tolist(), vals.tolist(), d)
            assert np.abs(attention(q, keys, vals) - expect).max() < 1e-6

    def test_weights_sum_to_one_via_ones_values(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            k = int(rng.integers(1, 9))
            out = attention(rng.normal(0, 3, 4), rng.normal(0, 3, (k, 4)), np.ones((k, 1)))
            assert abs(out[0] - 1.0) < 1e-6

    def test_softmax_rows_normalize(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(0, 5, (30, 7)).astype(np.float32)
        w = _softmax_rows(logits)
        assert np.abs(w.sum(axis=-1) - 1.0).max() < 1e-6
        logits[3] = -np.inf
        w = _softmax_rows(logits)
        assert w[3].sum() == 0.0


class TestMeatFeat:
    def test_masked_passthrough_bit_exact(self):
        rng = np.random.default_rng(3)
        feats = stack(rng)
        table = random_table(rng, 3, 4)
        params = AttentionParams.create(8, 27, seed=0)
        out = meat_feat(feats, table, embeddings(rng, 3), params)
        off = ~table.mask
        for v in range(3):
            assert np.array_equal(out.data[v][:, off[v]], feats.data[v][:, off[v]])

    def test_no_valid_keys_passthrough(self):
        rng = np.random.default_rng(4)
        feats = stack(rng)
        table = random_table(rng, 3, 4, mask_prob=1.0, valid_prob=0.0)
        out = meat_feat(feats, table, embeddings(rng, 3), AttentionParams.create(8, 27, seed=0))
        assert np.array_equal(out.data, feats.data)

    def test_source_permutation_invariance(self):
        rng = np.random.default_rng(5)
        feats = stack(rng)
        table = random_table(rng, 3, 4)
        emb = embeddings(rng, 3)
        params = AttentionParams.create(8, 27, seed=1)
        out1 = meat_feat(feats, table, emb, params)
        perm = (2, 0, 1)
        table2 = CorrespondenceTable(
            n_views=3, feature_width=4, feature_height=4,
            indices=table.indices[:, :, :, perm], valid=table.valid[:, :, :, perm],
            mask=table.mask, source_views=perm,
        )
        out2 = meat_feat(feats, table2, emb, params)
        assert np.abs(out1.data - out2.data).max() < 1e-6

    def test_training_width_shape(self):
        rng = np.random.default_rng(6)
        feats = stack(rng, n=7, c=64, s=16)
        table = random_table(rng, 7, 16)
        out = meat_feat(feats, table, embeddings(rng, 7), AttentionParams.create(64, 27, seed=2))
        assert out.data.shape == (7, 64, 16, 16)
        assert np.isfinite(out.data).all()

    def test_kv_count_matches_closed_form(self):
        rng = np.random.default_rng(7)
        n, c, s = 4, 8, 6
        feats = stack(rng, n=n, c=c, s=s)
        table = random_table(rng, n, s)
        stats = FusionStats()
        meat_feat(feats, table, embeddings(rng, n), AttentionParams.create(c, 27, seed=0), stats)
        assert stats.kv_elements == (n * s * s) * c * (n * 4)
        assert stats.q_elements == (n * s * s) * c
        assert stats.attn_map_elements == n * n * s * s * 4

    def test_local_only_table_ignores_other_views(self):
        rng = np.random.default_rng(8)
        n, s = 3, 4
        feats = stack(rng, n=n, s=s)
        table = random_table(rng, n, s, valid_prob=1.0)
        # keep only each view's own samples valid
        valid = table.valid.copy()
        for v in range(n):
            for u in range(n):
                if u != v:
                    valid[v, :, :, u] = False
        idx = table.indices.copy()
        idx[~valid] = 0
        table = CorrespondenceTable(n_views=n, feature_width=s, feature_height=s,
                                    indices=idx, valid=valid, mask=table.mask)
        emb = embeddings(rng, n)
        params = AttentionParams.create(8, 27, seed=3)
        out1 = meat_feat(feats, table, emb, params)
        other = feats.data.copy()
        other[1] = rng.standard_normal(other[1].shape).astype(np.float32)
        other[2] = 0.0
        out2 = meat_feat(FeatureStack(data=other, view_ids=feats.view_ids), table, emb, params)
        assert np.array_equal(out1.data[0], out2.data[0])

    def test_logit_shift_invariance(self):
        # add a rank-1 update to w_k that reads a constant input channel:
        # every key logit shifts by the same amount, softmax is unchanged
        rng = np.random.default_rng(9)
        n, c, s = 2, 6, 4
        data = rng.standard_normal((n, c, s, s)).astype(np.float32)
        data[:, 0] = 1.0
        feats = FeatureStack(data=data, view_ids=(0, 1))
        table = random_table(rng, n, s)
        emb = embeddings(rng, n)
        params = AttentionParams.create(c, 27, seed=4)
        wk2 = params.w_k + np.float32(0.7) * np.outer(
            rng.standard_normal(c).astype(np.float32), np.eye(c + 27, dtype=np.float32)[0]
        )
        params2 = AttentionParams(w_q=params.w_q, w_k=wk2, w_v=params.w_v, w_out=params.w_out)
        out1 = meat_feat(feats, table, emb, params)
        out2 = meat_feat(feats, table, emb, params2)
        assert np.abs(out1.data - out2.data).max() < 1e-6

    def test_shape_mismatch(self):
        rng = np.random.default_rng(10)
        feats = stack(rng, n=3, s=4)
        table = random_table(rng, 3, 8)
        with pytest.raises(ShapeMismatch):
            meat_feat(feats, table, embeddings(rng, 3), AttentionParams.create(8, 27, seed=0))


def ref_scales_for(c, h, w, seed=0):
    rng = np.random.default_rng(seed)
    return MultiScaleFeatures(scales=(
        rng.standard_normal((c, h, w)).astype(np.float32),
        rng.standard_normal((c, 2 * h, 2 * w)).astype(np.float32),
    ))


class TestMeatVae:
    def test_masked_passthrough_bit_exact(self):
        rng = np.random.default_rng(11)
        feats = stack(rng)
        table = random_table(rng, 3, 4)
        out = meat_vae(feats, ref_scales_for(8, 4, 4), table, 0, embeddings(rng, 3),
                       AttentionParams.create(8, 27, seed=0))
        off = ~table.mask
        for v in range(3):
            assert np.array_equal(out.data[v][:, off[v]], feats.data[v][:, off[v]])

    def test_key_count_exactly_four(self):
        rng = np.random.default_rng(12)
        n, c, s = 3, 8, 4
        feats = stack(rng, n=n, c=c, s=s)
        table = random_table(rng, n, s)
        stats = FusionStats()
        meat_vae(feats, ref_scales_for(c, s, s), table, 1, embeddings(rng, n),
                 AttentionParams.create(c, 27, seed=0), stats)
        assert stats.kv_elements == n * s * s * 4 * c

    def test_ref_out_of_bounds_passthrough(self):
        rng = np.random.default_rng(13)
        n, c, s = 2, 8, 4
        feats = stack(rng, n=n, c=c, s=s)
        table = random_table(rng, n, s, mask_prob=1.0, valid_prob=1.0)
        valid = table.valid.copy()
        valid[0, 2, 2, 0] = False  # ref view samples of one pixel
        idx = table.indices.copy()
        idx[~valid] = 0
        table = CorrespondenceTable(n_views=n, feature_width=s, feature_height=s,
                                    indices=idx, valid=valid, mask=table.mask)
        out = meat_vae(feats, ref_scales_for(c, s, s), table, 0, embeddings(rng, n),
                       AttentionParams.create(c, 27, seed=1))
        assert np.array_equal(out.data[0][:, 2, 2], feats.data[0][:, 2, 2])
        changed = out.data[0] != feats.data[0]
        assert changed.any()

    def test_no_matching_scale(self):
        rng = np.random.default_rng(14)
        feats = stack(rng)
        table = random_table(rng, 3, 4)
        with pytest.raises(NoMatchingScale):
            meat_vae(feats, ref_scales_for(8, 8, 8), table, 0, embeddings(rng, 3),
                     AttentionParams.create(8, 27, seed=0))


class TestSelfAttention:
    def test_singleton_spatial_map(self):
        rng = np.random.default_rng(15)
        feats = stack(rng, n=2, c=4, s=1)
        params = AttentionParams.create(4, 0, seed=0)
        out = per_view_self_attention(feats, params)
        for v in range(2):
            token = feats.data[v, :, 0, 0]
            expect = token + params.w_out @ (params.w_v @ token)
            assert np.abs(out.data[v, :, 0, 0] - expect).max() < 1e-6

    def test_view_independence_bit_exact(self):
        rng = np.random.default_rng(16)
        feats = stack(rng, n=2)
        params = AttentionParams.create(8, 0, seed=1)
        out1 = per_view_self_attention(feats, params)
        data2 = feats.data.copy()
        data2[1] += 1.0
        out2 = per_view_self_attention(FeatureStack(data=data2, view_ids=(0, 1)), params)
        assert np.array_equal(out1.data[0], out2.data[0])
        assert not np.array_equal(out1.data[1], out2.data[1])

    def test_uniform_map_stays_uniform(self):
        feats = FeatureStack(data=np.full((1, 4, 3, 3), 0.25, dtype=np.float32), view_ids=(0,))
        out = per_view_self_attention(feats, AttentionParams.create(4, 0, seed=2))
        flat = out.data[0].reshape(4, -1)
        assert np.abs(flat - flat[:, :1]).max() < 1e-6


class TestMeatBlock:
    def make_inputs(self, rng, n=3, c=8, s=4, zero_out=False):
        feats = stack(rng, n=n, c=c, s=s)
        table = random_table(rng, n, s)
        emb = embeddings(rng, n)
        params = MeatBlockParams.create(c, 27, seed=5, zero_out=zero_out)
        return feats, table, emb, params

    def test_all_masked_equals_self_attention_only(self):
        rng = np.random.default_rng(17)
        feats, _, emb, params = self.make_inputs(rng)
        table = random_table(rng, 3, 4, mask_prob=0.0)
        out = meat_block(feats, table, ref_scales_for(8, 4, 4), 0, emb, params)
        expect = per_view_self_attention(feats, params.self_attn)
        assert np.array_equal(out.data, expect.data)

    def test_zero_out_projections_identity(self):
        rng = np.random.default_rng(18)
        feats, table, emb, params = self.make_inputs(rng, zero_out=True)
        out = meat_block(feats, table, ref_scales_for(8, 4, 4), 0, emb, params)
        assert np.array_equal(out.data, feats.data)

    def test_training_width_shape(self):
        rng = np.random.default_rng(19)
        feats, table, emb, params = self.make_inputs(rng, n=7, c=64, s=16)
        out = meat_block(feats, table, ref_scales_for(64, 16, 16), 3, emb, params)
        assert out.data.shape == (7, 64, 16, 16)
        assert np.isfinite(out.data).all()


class TestDenseFuse:
    def test_single_view_equals_self_attention(self):
        rng = np.random.default_rng(20)
        feats = stack(rng, n=1)
        params = AttentionParams.create(8, 0, seed=3)
        emb = np.zeros((1, 0), dtype=np.float32)
        a = dense_mv_fuse(feats, emb, params)
        b = per_view_self_attention(feats, params)
        assert np.array_equal(a.data, b.data)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(21)
        feats = stack(rng, n=2, c=4, s=2)
        emb = embeddings(rng, 2, e=5)
        params = AttentionParams.create(4, 5, seed=4)
        out = dense_mv_fuse(feats, emb, params)
        expect = oracle_dense_fuse(feats.data, emb, params)
        assert np.abs(out.data - expect).max() < 1e-6

    def test_kv_count_matches_closed_form(self):
        rng = np.random.default_rng(22)
        n, c, s = 3, 8, 4
        feats = stack(rng, n=n, c=c, s=s)
        stats = FusionStats()
        dense_mv_fuse(feats, embeddings(rng, n), AttentionParams.create(c, 27, seed=0), stats)
        assert stats.kv_elements == n * c * (n * s * s)
        assert stats.attn_map_elements == n * n * s**4


class TestEpipolarFuse:
    def test_runs_and_counts(self):
        from meatkit.adaptation import sample_orbit_cameras
        from meatkit.correspondence import build_epipolar_candidates, mesh_depth_range
        from meatkit.synthetic import capsule_mesh

        rng = np.random.default_rng(23)
        n, c, s, k = 3, 8, 8, 4
        mesh = capsule_mesh()
        cams = sample_orbit_cameras((0, 0, 0), 3.0, 0.1, 0.9, n, width=s * 8, height=s * 8)
        cands = [build_epipolar_candidates(cams, v, mesh_depth_range(mesh, cams[v]), k, s) for v in range(n)]
        feats = stack(rng, n=n, c=c, s=s)
        stats = FusionStats()
        out = epipolar_fuse(feats, cands, embeddings(rng, n), AttentionParams.create(c, 27, seed=0), stats)
        assert out.data.shape == feats.data.shape
        assert stats.kv_elements == (n * s * s) * c * (n * k * 4)
        assert stats.attn_map_elements == n * n * s * s * k * 4


class TestKeypointEncoder:
    def test_zero_output_at_construction(self):
        rng = np.random.default_rng(24)
        enc = KeypointEncoder.create(16, seed=0)
        out = keypoint_encode(rng.standard_normal((3, 64, 48)).astype(np.float32), enc)
        assert out.shape == (16, 8, 6)
        assert not out.any()

    @pytest.mark.parametrize("hw", [(64, 48), (128, 128), (256, 192)])
    def test_downsample_factor_eight(self, hw):
        h, w = hw
        enc = KeypointEncoder.create(8, seed=1)
        out = keypoint_encode(np.ones((3, h, w), dtype=np.float32), enc)
        assert out.shape == (8, h // 8, w // 8)

    def test_non_divisible_rejected(self):
        enc = KeypointEncoder.create(8, seed=2)
        with pytest.raises(NonDivisibleResolution):
            keypoint_encode(np.ones((3, 60, 64), dtype=np.float32), enc)


class TestReferenceEncoder:
    def test_scale_shapes_coarse_to_fine(self):
        rng = np.random.default_rng(25)
        latent = rng.standard_normal((4, 32, 32)).astype(np.float32)
        ms = encode_reference_latent(latent, channels=8, n_scales=2, seed=0)
        assert [s.shape for s in ms.scales] == [(8, 8, 8), (8, 16, 16)]

    def test_deterministic_in_seed(self):
        rng = np.random.default_rng(26)
        latent = rng.standard_normal((4, 16, 16)).astype(np.float32)
        a = encode_reference_latent(latent, 8, 1, seed=3)
        b = encode_reference_latent(latent, 8, 1, seed=3)
        assert np.array_equal(a.scales[0], b.scales[0])

    def test_divisibility_enforced(self):
        with pytest.raises(NonDivisibleResolution):
            encode_reference_latent(np.ones((4, 18, 18), dtype=np.float32), 8, 2, seed=0)

    def test_multiscale_validation(self):
        with pytest.raises(MeatkitError):
            MultiScaleFeatures(scales=(np.ones((4, 8, 8), dtype=np.float32),
                                       np.ones((4, 8, 8), dtype=np.float32)))
        with pytest.raises(MeatkitError):
            MultiScaleFeatures(scales=(np.ones((4, 6, 6), dtype=np.float32),
                                       np.ones((4, 16, 16), dtype=np.float32)))
