"""Tests for the correlation layer, offset reordering, and the offset-indexed
kernels in both formulations."""

import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oacnet.correlation import (
    MultiplyCounter,
    OacKernelBank,
    correlation_map,
    count_multiplications,
    count_nonzero_offset_entries,
    dump_kernel_sheets,
    inverse_reorder,
    normalize_correlation,
    oac_backward_direct,
    oac_backward_reordered,
    oac_forward_direct,
    oac_forward_reordered,
    reorder_by_offset,
)
from oacnet.storage import load_image
from oacnet.tensor import ShapeError, grad_check, l2_normalize_channels


def oac_reference(c, bank):
    """Quadruple-loop evaluation of the offset-weighted sum (the defining form)."""
    HW, H, W = c.shape
    w = bank.weights.value
    out = np.zeros((bank.N, H, W))
    for n in range(bank.N):
        for i in range(H):
            for j in range(W):
                acc = bank.bias.value[n] if bank.use_bias else 0.0
                for k in range(H):
                    for l in range(W):
                        acc += w[n, i - k + H - 1, j - l + W - 1] * c[k * W + l, i, j]
                out[n, i, j] = max(acc, 0.0)
    return out


def random_bank(N, H, W, seed):
    return OacKernelBank(N, H, W, rng=np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# correlation map


class TestCorrelationMap:
    def test_orthonormal_features_give_indicator(self):
        # per-location vectors = distinct standard basis vectors
        H = W = 2
        D = 4
        f = np.zeros((D, H, W))
        for i in range(H):
            for j in range(W):
                f[i * W + j, i, j] = 1.0
        c = correlation_map(f, f)
        for i in range(H):
            for j in range(W):
                for k in range(H):
                    for l in range(W):
                        expected = 1.0 if (k, l) == (i, j) else 0.0
                        assert c[k * W + l, i, j] == expected

    def test_unit_vector_two_by_two_case(self):
        # a target that equals the source feature everywhere in channel space:
        # correlation vector [1,0,0,0] means target (0,0) matches
        D = 4
        f_trg = np.zeros((D, 2, 2))
        f_trg[0, 0, 0] = 1.0
        f_trg[1, 0, 1] = 1.0
        f_trg[2, 1, 0] = 1.0
        f_trg[3, 1, 1] = 1.0
        f_src = np.zeros((D, 2, 2))
        f_src[0, :, :] = 1.0  # every source location matches target (0,0)
        c = correlation_map(f_src, f_trg)
        # at source (0,0) the unit correlation sits at channel 0 = zero offset;
        # at source (0,1) the same channel encodes a move left
        assert np.allclose(c[:, 0, 0], [1, 0, 0, 0])
        assert np.allclose(c[:, 0, 1], [1, 0, 0, 0])

    def test_matches_nested_loop_reference(self):
        rng = np.random.default_rng(0)
        f_src = rng.standard_normal((3, 2, 2))
        f_trg = rng.standard_normal((3, 2, 2))
        c = correlation_map(f_src, f_trg)
        for i in range(2):
            for j in range(2):
                for k in range(2):
                    for l in range(2):
                        ref = float(np.dot(f_src[:, i, j], f_trg[:, k, l]))
                        assert np.isclose(c[k * 2 + l, i, j], ref, atol=1e-14)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            correlation_map(np.zeros((3, 2, 2)), np.zeros((3, 3, 3)))

    def test_normalized_features_bound_correlations(self):
        rng = np.random.default_rng(1)
        f_src = l2_normalize_channels(rng.standard_normal((8, 4, 4)))
        f_trg = l2_normalize_channels(rng.standard_normal((8, 4, 4)))
        c = correlation_map(f_src, f_trg)
        assert np.all(c >= -1.0 - 1e-12)
        assert np.all(c <= 1.0 + 1e-12)


class TestNormalizeCorrelation:
    def test_all_negative_location_becomes_zero(self):
        c = -np.ones((4, 2, 2))
        out = normalize_correlation(c)
        assert np.array_equal(out, np.zeros((4, 2, 2)))

    def test_single_positive_entry_becomes_one(self):
        c = np.full((4, 2, 2), -1.0)
        c[2, 1, 0] = 0.3
        out = normalize_correlation(c)
        assert np.isclose(out[2, 1, 0], 1.0)

    def test_norms_zero_or_one(self):
        rng = np.random.default_rng(2)
        c = rng.standard_normal((9, 3, 3))
        out = normalize_correlation(c)
        norms = np.sqrt(np.sum(out * out, axis=0))
        for v in norms.reshape(-1):
            assert v == 0.0 or abs(v - 1.0) < 1e-12


# ---------------------------------------------------------------------------
# reordering


class TestReorderByOffset:
    def test_channel_count_at_paper_scale(self):
        c = np.zeros((225, 15, 15))
        r = reorder_by_offset(c)
        assert r.shape == (841, 15, 15)

    def test_zero_offset_channel_placement(self):
        # unit correlation with target (0,0) at source (0,0) lands in the
        # zero-offset channel
        H = W = 2
        c = np.zeros((4, 2, 2))
        c[0, 0, 0] = 1.0
        r = reorder_by_offset(c)
        zero_off = (0 + H - 1) * (2 * W - 1) + (0 + W - 1)
        assert r[zero_off, 0, 0] == 1.0
        assert np.sum(r) == 1.0

    def test_round_trip_exact(self):
        rng = np.random.default_rng(3)
        c = rng.standard_normal((2, 4, 2, 2))
        r = reorder_by_offset(c)
        back = inverse_reorder(r, 2, 2)
        assert np.array_equal(back, c)

    def test_structural_zeros(self):
        H = W = 3
        c = np.ones((9, 3, 3))
        r = reorder_by_offset(c)
        for s in range(-(H - 1), H):
            for t in range(-(W - 1), W):
                ch = (s + H - 1) * (2 * W - 1) + (t + W - 1)
                for i in range(H):
                    for j in range(W):
                        k, l = i - s, j - t
                        exists = 0 <= k < H and 0 <= l < W
                        assert r[ch, i, j] == (1.0 if exists else 0.0)

    @given(st.integers(0, 2**32 - 1), st.integers(2, 5), st.integers(2, 5))
    @settings(max_examples=20, deadline=None)
    def test_round_trip_property(self, seed, H, W):
        rng = np.random.default_rng(seed)
        c = rng.standard_normal((H * W, H, W))
        assert np.array_equal(inverse_reorder(reorder_by_offset(c), H, W), c)


# ---------------------------------------------------------------------------
# OAC kernels


class TestOacForward:
    def test_delta_kernel_reads_self_position(self):
        rng = np.random.default_rng(4)
        H = W = 3
        c = rng.standard_normal((H * W, H, W))
        bank = OacKernelBank(1, H, W)  # zero weights
        bank.weights.value[0, H - 1, W - 1] = 1.0  # w_{0,0}
        h, _ = oac_forward_direct(c, bank)
        for i in range(H):
            for j in range(W):
                assert np.isclose(h[0, i, j], max(c[i * W + j, i, j], 0.0), atol=1e-14)

    def test_offset_weight_shared_across_sources(self):
        # w_{0,0} pairs source (0,0) with target (0,0) and source (0,1) with
        # target (0,1): one weight, one offset, every source location
        H = W = 2
        bank = OacKernelBank(1, H, W)
        bank.weights.value[0, H - 1, W - 1] = 1.0
        c = np.zeros((4, 2, 2))
        c[0, 0, 0] = 0.5  # source (0,0) x target (0,0)
        c[1, 0, 1] = 0.7  # source (0,1) x target (0,1)
        h, _ = oac_forward_direct(c, bank)
        assert np.isclose(h[0, 0, 0], 0.5)
        assert np.isclose(h[0, 0, 1], 0.7)

    def test_matches_quadruple_loop_reference(self):
        rng = np.random.default_rng(5)
        c = rng.standard_normal((9, 3, 3))
        bank = random_bank(2, 3, 3, seed=6)
        bank.bias.value[...] = rng.standard_normal(2)
        h, _ = oac_forward_direct(c, bank)
        assert np.allclose(h, oac_reference(c, bank), atol=1e-12)

    def test_reordered_matches_reference(self):
        rng = np.random.default_rng(7)
        c = rng.standard_normal((16, 4, 4))
        bank = random_bank(3, 4, 4, seed=8)
        h, _ = oac_forward_reordered(c, bank)
        assert np.allclose(h, oac_reference(c, bank), atol=1e-12)

    def test_zero_weight_bank_gives_relu_bias(self):
        bank = OacKernelBank(2, 3, 3)
        bank.bias.value[...] = [0.4, -0.2]
        c = np.random.default_rng(9).standard_normal((9, 3, 3))
        h, _ = oac_forward_reordered(c, bank)
        assert np.allclose(h[0], 0.4)
        assert np.allclose(h[1], 0.0)

    def test_dimension_mismatch_rejected(self):
        bank = OacKernelBank(1, 3, 3)
        with pytest.raises(ShapeError):
            oac_forward_direct(np.zeros((16, 4, 4)), bank)

    @given(st.integers(0, 2**32 - 1), st.integers(2, 6), st.integers(2, 6),
           st.integers(1, 4))
    @settings(max_examples=40, deadline=None)
    def test_equivalence_property(self, seed, H, W, N):
        rng = np.random.default_rng(seed)
        c = rng.standard_normal((H * W, H, W))
        bank = random_bank(N, H, W, seed=seed ^ 0xABCD)
        bank.bias.value[...] = rng.standard_normal(N)
        hd, _ = oac_forward_direct(c, bank)
        hr, _ = oac_forward_reordered(c, bank)
        assert np.max(np.abs(hd - hr)) < 1e-10

    def test_translation_equivariance_on_toroidal_features(self):
        # rolling toroidal features rolls the output identically
        rng = np.random.default_rng(10)
        H = W = 4
        f = rng.standard_normal((6, H, W))
        bank = random_bank(2, H, W, seed=11)
        bank.use_bias = False

        def run(fs, ft):
            h, _ = oac_forward_direct(correlation_map(fs, ft), bank)
            return h

        base = run(f, f)
        for di, dj in [(1, 0), (0, 2), (2, 3)]:
            rolled = np.roll(f, (di, dj), axis=(1, 2))
            out = run(rolled, rolled)
            # wrap-around pairs leave the valid window, so compare the
            # displacement channel of matching interior positions instead of
            # demanding global equality: the zero-offset (self) correlations
            # are preserved under a common roll
            c_base = correlation_map(f, f)
            c_roll = correlation_map(rolled, rolled)
            for i in range(H):
                for j in range(W):
                    ii, jj = (i + di) % H, (j + dj) % W
                    assert np.isclose(
                        c_roll[ii * W + jj, ii, jj], c_base[i * W + j, i, j], atol=1e-12
                    )
            assert out.shape == base.shape


class TestOacBackward:
    def test_zero_upstream_zero_grads(self):
        rng = np.random.default_rng(12)
        c = rng.standard_normal((9, 3, 3))
        bank = random_bank(2, 3, 3, seed=13)
        _, cache = oac_forward_direct(c, bank)
        dc = oac_backward_direct(cache, bank, np.zeros((2, 3, 3)))
        assert np.array_equal(bank.weights.grad, np.zeros_like(bank.weights.grad))
        assert np.array_equal(dc, np.zeros((1, 9, 3, 3)))

    def test_single_location_weight_gradient(self):
        # upstream 1 at (n,i,j)=(0,1,1): dL/dw_{s,t} = c_{1-s, 1-t; 1,1}
        H = W = 3
        rng = np.random.default_rng(14)
        c = np.abs(rng.standard_normal((9, 3, 3)))  # positive -> ReLU passes
        bank = OacKernelBank(1, H, W)
        bank.weights.value[...] = 0.0
        bank.bias.value[...] = 1.0  # keep pre-activation positive
        _, cache = oac_forward_direct(c, bank)
        g = np.zeros((1, 3, 3))
        g[0, 1, 1] = 1.0
        oac_backward_direct(cache, bank, g)
        for s in range(-2, 3):
            for t in range(-2, 3):
                k, l = 1 - s, 1 - t
                expected = c[k * W + l, 1, 1] if 0 <= k < H and 0 <= l < W else 0.0
                assert np.isclose(bank.weights.grad[0, s + 2, t + 2], expected, atol=1e-14)

    @pytest.mark.parametrize("forward,backward", [
        (oac_forward_direct, oac_backward_direct),
        (oac_forward_reordered, oac_backward_reordered),
    ])
    def test_finite_difference(self, forward, backward):
        rng = np.random.default_rng(15)
        c = rng.uniform(-1, 1, (16, 4, 4))
        bank = random_bank(2, 4, 4, seed=16)
        bank.bias.value[...] = rng.uniform(-0.2, 0.2, 2)
        proj = rng.standard_normal((2, 4, 4))

        def loss_fn(compute_grads):
            h, cache = forward(c, bank)
            if compute_grads:
                backward(cache, bank, h * 0 + proj)
            return float(np.sum(h * proj))

        report = grad_check(loss_fn, bank.parameters())
        assert max(report.values()) < 1e-4

    def test_gradient_equivalence_between_paths(self):
        rng = np.random.default_rng(17)
        c = rng.standard_normal((25, 5, 5))
        proj = rng.standard_normal((3, 5, 5))
        grads = []
        for fwd, bwd in [(oac_forward_direct, oac_backward_direct),
                         (oac_forward_reordered, oac_backward_reordered)]:
            bank = random_bank(3, 5, 5, seed=18)
            _, cache = fwd(c, bank)
            dc = bwd(cache, bank, proj)
            grads.append((bank.weights.grad.copy(), bank.bias.grad.copy(), dc))
        assert np.max(np.abs(grads[0][0] - grads[1][0])) < 1e-8
        assert np.max(np.abs(grads[0][1] - grads[1][1])) < 1e-12
        assert np.max(np.abs(grads[0][2] - grads[1][2])) < 1e-10


# ---------------------------------------------------------------------------
# multiplication counting


class TestCountMultiplications:
    def test_minimal_case(self):
        assert count_multiplications(1, 1, 1, "direct") == 1
        assert count_multiplications(1, 1, 1, "reordered") == 1

    def test_paper_scale_values(self):
        assert count_multiplications(15, 15, 128, "direct") == 6_480_000
        assert count_multiplications(15, 15, 128, "reordered") == 24_220_800

    def test_paper_scale_ratio(self):
        d = count_multiplications(15, 15, 128, "direct")
        r = count_multiplications(15, 15, 128, "reordered")
        assert np.isclose(r / d, (435 / 225) ** 2)
        assert np.isclose(r / d, 3.738, atol=5e-4)

    @pytest.mark.parametrize("H,W,N", [(4, 4, 2), (8, 8, 16), (15, 15, 128)])
    def test_instrumented_counts_match_formulas(self, H, W, N):
        rng = np.random.default_rng(19)
        c = rng.standard_normal((H * W, H, W))
        bank = random_bank(N, H, W, seed=20)
        counter = MultiplyCounter()
        oac_forward_direct(c, bank, counter=counter)
        assert counter.total == count_multiplications(H, W, N, "direct")
        counter.reset()
        oac_forward_reordered(c, bank, counter=counter)
        assert counter.total == count_multiplications(H, W, N, "reordered")

    def test_nonzero_only_count_equals_direct(self):
        for H, W, N in [(3, 3, 1), (5, 4, 2), (15, 15, 128)]:
            assert count_nonzero_offset_entries(H, W, N) == count_multiplications(H, W, N, "direct")

    def test_bad_path_rejected(self):
        with pytest.raises(ValueError):
            count_multiplications(2, 2, 1, "sparse")


# ---------------------------------------------------------------------------
# kernel sheet dumps


class TestDumpKernelSheets:
    def test_writes_readable_graymaps(self, tmp_path):
        bank = random_bank(3, 4, 4, seed=21)
        paths = dump_kernel_sheets(bank, str(tmp_path))
        assert len(paths) == 3
        for p in paths:
            img = load_image(p)
            assert img.shape == (1, 7, 7)
            assert img.min() >= 0.0 and img.max() <= 1.0
