"""Patch tokenization, masks, attention and the KV cache."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from canvid.autodiff import Tensor
from canvid.blocks import (
    KVCache, SelfAttention, TransformerBlock, attend_with_cache, attention,
    build_hybrid_mask, patchify, patchify_array, sinusoidal_pe, unpatchify_array,
)
from canvid.rng import RngStream


class TestPatchify:
    def test_tokens_follow_raster_order(self):
        frame = np.arange(16, dtype=np.float32).reshape(4, 4, 1)
        grid = patchify(frame, 2)
        assert grid.tokens.shape == (4, 4)
        # token 0 is the top-left patch, flattened in raster order
        assert np.array_equal(grid.tokens[0], [0, 1, 4, 5])
        assert np.array_equal(grid.tokens[1], [2, 3, 6, 7])

    def test_constant_frame_gives_identical_tokens(self):
        grid = patchify(np.full((8, 8, 1), 0.25, dtype=np.float32), 4)
        assert np.all(grid.tokens == grid.tokens[0])

    def test_roundtrip_identity(self):
        frame = RngStream(4).uniform((12, 8, 3)).astype(np.float32)
        tokens = patchify_array(frame, 4)
        back = unpatchify_array(tokens, 12, 8, 4, 3)
        assert np.array_equal(back, frame)

    def test_indivisible_dims_rejected(self):
        with pytest.raises(ValueError):
            patchify(np.zeros((6, 6, 1), dtype=np.float32), 4)

    @settings(max_examples=25, deadline=None)
    @given(st.sampled_from([1, 2, 4]), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2 ** 31 - 1))
    def test_roundtrip_property(self, patch, gh, gw, seed):
        frame = RngStream(seed).uniform((gh * patch, gw * patch, 1)).astype(np.float32)
        assert np.array_equal(
            unpatchify_array(patchify_array(frame, patch), gh * patch, gw * patch, patch, 1), frame)


class TestHybridMask:
    def test_two_frames_two_tokens(self):
        mask = build_hybrid_mask(2, 2)
        expected = np.array([
            [1, 1, 0, 0],
            [1, 1, 0, 0],
            [1, 1, 1, 1],
            [1, 1, 1, 1],
        ], dtype=bool)
        assert np.array_equal(mask, expected)

    def test_single_frame_fully_visible(self):
        assert build_hybrid_mask(1, 5).all()

    def test_single_token_frames_reduce_to_causal(self):
        mask = build_hybrid_mask(3, 1)
        assert np.array_equal(mask, np.tril(np.ones((3, 3), dtype=bool)))

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            build_hybrid_mask(0, 4)


class TestAttention:
    def test_single_key_returns_value(self):
        rng = RngStream(1)
        q = Tensor(rng.gaussian((1, 8)))
        v = Tensor(rng.gaussian((1, 8)))
        out = attention(q, Tensor(rng.gaussian((1, 8))), v, None, heads=2)
        assert np.allclose(out.data, v.data, atol=1e-6)

    def test_identity_mask_selects_own_value(self):
        rng = RngStream(2)
        q, k, v = (Tensor(rng.gaussian((4, 8))) for _ in range(3))
        out = attention(q, k, v, np.eye(4, dtype=bool), heads=2)
        assert np.allclose(out.data, v.data, atol=1e-6)

    def test_equal_scores_average_values(self):
        q = Tensor(np.zeros((1, 4), dtype=np.float32))
        k = Tensor(np.zeros((2, 4), dtype=np.float32))
        v = Tensor(np.stack([np.ones(4), 3 * np.ones(4)]).astype(np.float32))
        out = attention(q, k, v, None, heads=1)
        assert np.allclose(out.data, 2.0, atol=1e-6)

    def test_fully_masked_row_rejected(self):
        rng = RngStream(3)
        q, k, v = (Tensor(rng.gaussian((2, 4))) for _ in range(3))
        mask = np.array([[True, True], [False, False]])
        with pytest.raises(ValueError, match="fully masked"):
            attention(q, k, v, mask, heads=1)

    def test_dim_mismatch_rejected(self):
        rng = RngStream(4)
        with pytest.raises(ValueError):
            attention(Tensor(rng.gaussian((2, 6))), Tensor(rng.gaussian((2, 6))),
                      Tensor(rng.gaussian((2, 6))), None, heads=4)

    def test_joint_kv_permutation_invariance(self):
        rng = RngStream(5)
        q = Tensor(rng.gaussian((3, 8)))
        k = rng.gaussian((6, 8))
        v = rng.gaussian((6, 8))
        perm = RngStream(6).permutation(6)
        base = attention(q, Tensor(k), Tensor(v), None, heads=2)
        shuffled = attention(q, Tensor(k[perm]), Tensor(v[perm]), None, heads=2)
        assert np.abs(base.data - shuffled.data).max() < 1e-5

    def test_future_frame_perturbation_cannot_leak_backward(self):
        rng = RngStream(7)
        mask = build_hybrid_mask(3, 2)
        x = rng.gaussian((6, 8))
        attn = SelfAttention(rng.substream("attn"), 8, 2)
        base = attn(Tensor(x), mask).data
        bumped = x.copy()
        bumped[4:] += 10.0  # frame 2
        out = attn(Tensor(bumped), mask).data
        assert np.abs(out[:4] - base[:4]).max() < 1e-6


class TestKVCache:
    def test_empty_cache_single_frame_equals_plain_attention(self):
        rng = RngStream(8)
        q, k, v = (Tensor(rng.gaussian((4, 8))) for _ in range(3))
        cached, _ = attend_with_cache(KVCache(), q, k, v, heads=2)
        plain = attention(q, k, v, None, heads=2)
        assert np.array_equal(cached.data, plain.data)

    def test_zero_new_tokens_is_a_noop(self):
        rng = RngStream(9)
        cache = KVCache()
        attend_with_cache(cache, Tensor(rng.gaussian((2, 8))), Tensor(rng.gaussian((2, 8))),
                          Tensor(rng.gaussian((2, 8))), heads=2)
        before = cache.length
        empty = Tensor(np.zeros((0, 8), dtype=np.float32))
        out, cache = attend_with_cache(cache, empty, empty, empty, heads=2)
        assert out.data.shape == (0, 8)
        assert cache.length == before

    @pytest.mark.parametrize("layers", [1, 2])
    @pytest.mark.parametrize("frames", [1, 3, 8])
    def test_frame_by_frame_equals_full_pass(self, layers, frames):
        rng = RngStream(10)
        n, dim = 3, 16
        blocks = [TransformerBlock(rng.substream("b", i), dim, 2) for i in range(layers)]
        x = rng.gaussian((frames * n, dim))
        full_mask = build_hybrid_mask(frames, n)

        h = Tensor(x)
        for block in blocks:
            h = block(h, full_mask)
        full = h.data

        caches = [KVCache() for _ in blocks]
        outs = []
        for f in range(frames):
            h = Tensor(x[f * n:(f + 1) * n])
            for block, cache in zip(blocks, caches):
                h = block(h, cache=cache)
            outs.append(h.data)
        assert np.abs(np.concatenate(outs) - full).max() < 1e-5

    def test_mismatched_append_rejected(self):
        rng = RngStream(11)
        cache = KVCache()
        cache.append(rng.gaussian((2, 8)), rng.gaussian((2, 8)))
        with pytest.raises(ValueError):
            cache.append(rng.gaussian((2, 4)), rng.gaussian((2, 4)))


class TestSinusoidalPe:
    def test_position_zero_is_sin0_cos1(self):
        pe = sinusoidal_pe(4, 8)
        assert np.allclose(pe[0, 0::2], 0.0)
        assert np.allclose(pe[0, 1::2], 1.0)

    def test_deterministic(self):
        assert np.array_equal(sinusoidal_pe(6, 12), sinusoidal_pe(6, 12))

    def test_adjacent_positions_differ_in_every_slow_pair(self):
        dim = 16
        pe = sinusoidal_pe(2, dim)
        freqs = np.exp(-np.log(10000.0) * np.arange(dim // 2) / (dim // 2))
        for i, w in enumerate(freqs):
            if 2 * np.pi / w > 2.0:  # wavelength longer than two positions
                assert not np.allclose(pe[0, 2 * i:2 * i + 2], pe[1, 2 * i:2 * i + 2])

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError):
            sinusoidal_pe(4, 7)
