"""Unit tests for the attention primitives against scalar-loop oracles and
frozen fixture values."""

import numpy as np
import pytest
import torch

from edge_lbam.attention import (
    AttentionParams,
    EdgeGuidanceKernels,
    LayerState,
    convolve_mask,
    edge_attention_gate,
    edge_lfam_layer,
    edge_lram_layer,
    hard_attention,
    hard_mask_update,
    lfam_layer,
    lram_layer,
    pconv_layer,
    soft_attention,
    soft_mask_update,
    uniform_kernel,
)

import oracles

torch.manual_seed(0)


def t64(arr):
    return torch.as_tensor(np.asarray(arr), dtype=torch.float64)


def default_params(dtype=torch.float64, **kw):
    return AttentionParams(dtype=dtype, **kw)


class TestUniformKernel:
    def test_values(self):
        k = uniform_kernel(3, dtype=torch.float64)
        assert k.shape == (1, 1, 3, 3)
        np.testing.assert_allclose(k.numpy(), np.full((1, 1, 3, 3), 1.0 / 9.0))
        assert abs(k.sum().item() - 1.0) < 1e-12

    def test_other_sizes(self):
        k = uniform_kernel(4, dtype=torch.float64)
        assert k.shape == (1, 1, 4, 4)
        assert abs(k[0, 0, 0, 0].item() - 1.0 / 16.0) < 1e-15


class TestConvolveMask:
    def test_all_ones_corners_and_interior(self):
        mask = torch.ones(4, 4, dtype=torch.float64)
        mc = convolve_mask(mask, uniform_kernel(3, dtype=torch.float64), padding=1)
        assert mc.shape == (4, 4)
        # corner sees 4 known neighbors of 9 taps, edge 6, interior all 9
        assert abs(mc[0, 0].item() - 4.0 / 9.0) < 1e-12
        assert abs(mc[0, 1].item() - 6.0 / 9.0) < 1e-12
        assert abs(mc[1, 1].item() - 1.0) < 1e-12

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(11)
        for stride, padding, k in [(1, 1, 3), (2, 1, 4), (1, 0, 3), (2, 2, 5)]:
            h = 8 if (8 + 2 * padding - k) % stride == 0 else 9
            mask = rng.random((2, 1, h, h))
            kern = rng.random((1, 1, k, k))
            got = convolve_mask(t64(mask), t64(kern), stride=stride, padding=padding)
            want = oracles.conv2d_loop(mask, kern, stride=stride, padding=padding)
            np.testing.assert_allclose(got.numpy(), want, atol=1e-12)

    def test_2d_and_4d_agree(self):
        rng = np.random.default_rng(3)
        mask = rng.random((6, 6))
        kern = rng.random((1, 1, 3, 3))
        a = convolve_mask(t64(mask), t64(kern), padding=1)
        b = convolve_mask(t64(mask)[None, None], t64(kern), padding=1)
        np.testing.assert_allclose(a.numpy(), b[0, 0].numpy())

    def test_rejects_fractional_output_size(self):
        mask = torch.ones(5, 5, dtype=torch.float64)
        kern = torch.ones(1, 1, 4, 4, dtype=torch.float64)
        with pytest.raises(ValueError):
            convolve_mask(mask, kern, stride=2, padding=1)

    def test_rejects_non_finite(self):
        mask = torch.ones(4, 4, dtype=torch.float64)
        mask[1, 1] = float("nan")
        with pytest.raises(ValueError):
            convolve_mask(mask, uniform_kernel(3, dtype=torch.float64), padding=1)

    def test_rejects_multichannel(self):
        mask = torch.ones(1, 2, 4, 4, dtype=torch.float64)
        with pytest.raises(ValueError):
            convolve_mask(mask, uniform_kernel(3, dtype=torch.float64), padding=1)


class TestHardActivations:
    def test_hard_attention_values(self):
        mc = t64([[0.0, 0.5, 1.0, 4.0 / 9.0]])
        got = hard_attention(mc)
        np.testing.assert_allclose(got.numpy(), [[0.0, 2.0, 1.0, 9.0 / 4.0]])

    def test_hard_mask_values(self):
        mc = t64([[0.0, 1e-9, 1.0, -0.5]])
        got = hard_mask_update(mc)
        np.testing.assert_allclose(got.numpy(), [[0.0, 1.0, 1.0, 0.0]])


class TestSoftActivations:
    def test_frozen_attention_fixtures(self):
        p = default_params()
        # value at the peak is exactly a
        assert soft_attention(t64([2.0]), p).item() == pytest.approx(1.1, abs=0)
        assert soft_attention(t64([0.0]), p).item() == pytest.approx(
            0.0201472027776076, abs=1e-15
        )
        assert soft_attention(t64([0.5]), p).item() == pytest.approx(
            0.11593914701805078, abs=1e-15
        )
        assert soft_attention(t64([3.0]), p).item() == pytest.approx(
            1.0367879441171441, abs=1e-15
        )

    def test_frozen_mask_fixtures(self):
        alpha = 0.8
        assert soft_mask_update(t64([1.0]), alpha).item() == 1.0
        assert soft_mask_update(t64([0.0]), alpha).item() == 0.0
        assert soft_mask_update(t64([-3.0]), alpha).item() == 0.0
        assert soft_mask_update(t64([0.5]), alpha).item() == pytest.approx(
            0.5743491774985174, abs=1e-15
        )
        assert soft_mask_update(t64([0.25]), alpha).item() == pytest.approx(
            0.32987697769322355, abs=1e-15
        )

    def test_matches_scalar_oracle_on_grid(self):
        p = AttentionParams(a=1.3, mu=1.5, gamma_l=0.7, gamma_r=2.0, alpha=0.6,
                            dtype=torch.float64)
        mc = np.linspace(-1.0, 4.0, 101)
        got_a = soft_attention(t64(mc), p).detach().numpy()
        got_m = soft_mask_update(t64(mc), p.alpha).numpy()
        want_a = [oracles.soft_attention_scalar(v, 1.3, 1.5, 0.7, 2.0) for v in mc]
        want_m = [oracles.soft_mask_scalar(v, 0.6) for v in mc]
        np.testing.assert_allclose(got_a, want_a, atol=1e-14)
        np.testing.assert_allclose(got_m, want_m, atol=1e-14)

    def test_continuity_at_mu(self):
        p = AttentionParams(a=1.4, mu=1.7, gamma_l=3.0, gamma_r=0.2,
                            dtype=torch.float64)
        eps = 1e-9
        below = soft_attention(t64([1.7 - eps]), p).item()
        at = soft_attention(t64([1.7]), p).item()
        assert at == pytest.approx(1.4, abs=0)
        assert abs(below - at) < 1e-8

    def test_mask_update_monotone(self):
        mc = t64(np.linspace(0.0, 3.0, 64))
        out = soft_mask_update(mc, 0.8).numpy()
        assert (np.diff(out) > 0).all()

    def test_attention_bounded_by_peak(self):
        p = default_params()
        mc = t64(np.linspace(-2.0, 6.0, 400))
        out = soft_attention(mc, p).detach().numpy()
        assert (out <= 1.1 + 1e-12).all()
        assert (out >= 0.0).all()


class TestAttentionParams:
    def test_defaults(self):
        p = AttentionParams()
        assert p.a.item() == pytest.approx(1.1)
        assert p.mu.item() == pytest.approx(2.0)
        assert p.gamma_l.item() == pytest.approx(1.0)
        assert p.gamma_r.item() == pytest.approx(1.0)
        assert p.alpha.item() == pytest.approx(0.8)

    def test_alpha_not_trainable(self):
        p = AttentionParams()
        names = {n for n, _ in p.named_parameters()}
        assert names == {"a", "mu", "gamma_l", "gamma_r"}
        assert "alpha" in dict(p.named_buffers())

    def test_project_clamps_gammas(self):
        p = AttentionParams(dtype=torch.float64)
        with torch.no_grad():
            p.gamma_l.fill_(-0.3)
            p.gamma_r.fill_(0.4)
        p.project_()
        assert p.gamma_l.item() == 0.0
        assert p.gamma_r.item() == 0.4

    def test_rejects_negative_init(self):
        with pytest.raises(ValueError):
            AttentionParams(gamma_l=-1.0)


class TestPconvLayer:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            feat = rng.standard_normal((1, 3, 6, 6))
            mask = (rng.random((1, 1, 6, 6)) > 0.4).astype(np.float64)
            w = rng.standard_normal((4, 3, 3, 3)) * 0.3
            got_f, got_m = pconv_layer(t64(feat), t64(mask), t64(w))
            want_f, want_m = oracles.pconv_loop(feat, mask, w)
            np.testing.assert_allclose(got_f.numpy(), want_f, atol=1e-10)
            np.testing.assert_allclose(got_m.numpy(), want_m, atol=1e-12)

    def test_unreached_holes_stay_zero(self):
        rng = np.random.default_rng(8)
        feat = rng.standard_normal((1, 2, 10, 10))
        mask = np.ones((1, 1, 10, 10))
        mask[:, :, 2:9, 2:9] = 0.0
        w = rng.standard_normal((2, 2, 3, 3))
        out_f, out_m = pconv_layer(t64(feat), t64(mask), t64(w))
        hole = out_m.numpy() == 0.0
        assert hole.any()
        assert np.abs(out_f.numpy() * hole).max() == 0.0

    def test_fully_known_mask_is_plain_conv(self):
        rng = np.random.default_rng(9)
        feat = rng.standard_normal((1, 2, 8, 8))
        mask = np.ones((1, 1, 8, 8))
        w = rng.standard_normal((3, 2, 3, 3))
        out_f, out_m = pconv_layer(t64(feat), t64(mask), t64(w))
        # interior renormalization is 1/1; border upweights by 9/coverage
        plain = oracles.conv2d_loop(feat, w, 1, 1)
        np.testing.assert_allclose(out_f.numpy()[:, :, 1:-1, 1:-1],
                                   plain[:, :, 1:-1, 1:-1], atol=1e-10)
        assert (out_m.numpy() == 1.0).all()

    def test_zero_mask_fixed_point(self):
        feat = torch.randn(1, 2, 6, 6, dtype=torch.float64)
        mask = torch.zeros(1, 1, 6, 6, dtype=torch.float64)
        w = torch.randn(2, 2, 3, 3, dtype=torch.float64)
        out_f, out_m = pconv_layer(feat, mask, w)
        assert out_f.abs().max().item() == 0.0
        assert out_m.abs().max().item() == 0.0


class TestLfamLayer:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(21)
        for stride, padding in [(1, 1), (2, 1)]:
            feat = rng.standard_normal((2, 3, 8, 8))
            mask = (rng.random((2, 1, 8, 8)) > 0.35).astype(np.float64)
            w = rng.standard_normal((4, 3, 4, 4)) * 0.2
            k_m = rng.random((1, 1, 4, 4)) * 0.2
            p = AttentionParams(a=1.2, mu=1.1, gamma_l=0.9, gamma_r=1.7,
                                alpha=0.8, dtype=torch.float64)
            got = lfam_layer(t64(feat), t64(mask), t64(w), t64(k_m), p,
                             stride=stride, padding=padding)
            want_f, want_m, want_a = oracles.lfam_loop(
                feat, mask, w, k_m, 1.2, 1.1, 0.9, 1.7, 0.8, stride, padding)
            np.testing.assert_allclose(got.feature.detach().numpy(), want_f, atol=1e-10)
            np.testing.assert_allclose(got.mask.detach().numpy(), want_m, atol=1e-12)
            np.testing.assert_allclose(got.attention.detach().numpy(), want_a, atol=1e-12)

    def test_hard_mode_reproduces_pconv_on_masked_features(self):
        # partial conv pre-multiplies by the mask; with features already zero
        # in holes the two coincide, which is the regime stacked layers live in
        rng = np.random.default_rng(22)
        feat = rng.standard_normal((1, 3, 8, 8))
        mask = (rng.random((1, 1, 8, 8)) > 0.5).astype(np.float64)
        feat = feat * mask
        w = rng.standard_normal((2, 3, 3, 3))
        k = uniform_kernel(3, dtype=torch.float64)
        got = lfam_layer(t64(feat), t64(mask), t64(w), k, default_params(), hard=True)
        want_f, want_m = pconv_layer(t64(feat), t64(mask), t64(w))
        np.testing.assert_allclose(got.feature.numpy(), want_f.numpy(), atol=1e-12)
        np.testing.assert_allclose(got.mask.numpy(), want_m.numpy(), atol=1e-12)

    def test_gradients_reach_all_parameters(self):
        p = default_params()
        k_m = torch.full((1, 1, 3, 3), 1.0 / 9.0, dtype=torch.float64,
                         requires_grad=True)
        w = torch.randn(2, 2, 3, 3, dtype=torch.float64, requires_grad=True)
        feat = torch.randn(1, 2, 6, 6, dtype=torch.float64)
        mask = (torch.rand(1, 1, 6, 6, dtype=torch.float64) > 0.4).double()
        out = lfam_layer(feat, mask, w, k_m, p)
        (out.feature.sum() + out.mask.sum()).backward()
        for t in [p.a, p.mu, p.gamma_l, p.gamma_r, k_m, w]:
            assert t.grad is not None
            assert torch.isfinite(t.grad).all()

    def test_gradcheck(self):
        p = default_params()
        feat = torch.randn(1, 1, 5, 5, dtype=torch.float64, requires_grad=True)
        mask = torch.rand(1, 1, 5, 5, dtype=torch.float64) + 0.1
        w = torch.randn(1, 1, 3, 3, dtype=torch.float64, requires_grad=True)
        k_m = torch.rand(1, 1, 3, 3, dtype=torch.float64, requires_grad=True)

        def fn(f, wt, km):
            r = lfam_layer(f, mask, wt, km, p)
            return r.feature, r.mask

        assert torch.autograd.gradcheck(fn, (feat, w, k_m), atol=1e-6)


def make_gate_kernels(rng, k=4, hidden=4, k2=3, scale=0.3):
    gate_in = rng.standard_normal((hidden, 2, k, k)) * scale
    gate_out = rng.standard_normal((1, hidden, k2, k2)) * scale
    return gate_in, gate_out


class TestEdgeGate:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(31)
        mask = rng.random((1, 1, 8, 8))
        edge = (rng.random((1, 1, 8, 8)) > 0.8).astype(np.float64)
        gate_in, gate_out = make_gate_kernels(rng)
        got = edge_attention_gate(t64(mask), t64(edge), t64(gate_in), t64(gate_out),
                                  stride=2, padding=1)
        want = oracles.edge_gate_loop(mask, edge, gate_in, gate_out, 2, 1)
        assert got.shape == (1, 1, 4, 4)
        np.testing.assert_allclose(got.numpy(), want, atol=1e-12)

    def test_saturates_to_exact_one(self):
        # presigmoid >= 40 rounds to exactly 1.0 in float64
        mask = torch.ones(1, 1, 8, 8, dtype=torch.float64)
        edge = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
        gate_in = torch.zeros(2, 2, 4, 4, dtype=torch.float64)
        gate_in[:, 0] = 1.0 / 16.0
        gate_out = torch.full((1, 2, 3, 3), 100.0, dtype=torch.float64)
        got = edge_attention_gate(mask, edge, gate_in, gate_out, stride=2, padding=1)
        assert (got.numpy() == 1.0).all()

    def test_saturates_to_exact_zero(self):
        # presigmoid <= -745 underflows to exactly 0.0 in float64
        mask = torch.ones(1, 1, 8, 8, dtype=torch.float64)
        edge = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
        gate_in = torch.zeros(2, 2, 4, 4, dtype=torch.float64)
        gate_in[:, 0] = 1.0 / 16.0
        gate_out = torch.full((1, 2, 3, 3), -2000.0, dtype=torch.float64)
        got = edge_attention_gate(mask, edge, gate_in, gate_out, stride=2, padding=1)
        assert (got.numpy() == 0.0).all()

    def test_rejects_resolution_mismatch(self):
        mask = torch.ones(1, 1, 8, 8, dtype=torch.float64)
        edge = torch.ones(1, 1, 4, 4, dtype=torch.float64)
        gate_in = torch.randn(2, 2, 4, 4, dtype=torch.float64)
        gate_out = torch.randn(1, 2, 3, 3, dtype=torch.float64)
        with pytest.raises(ValueError):
            edge_attention_gate(mask, edge, gate_in, gate_out, stride=2, padding=1)

    def test_rejects_even_second_kernel(self):
        mask = torch.ones(1, 1, 8, 8, dtype=torch.float64)
        edge = torch.zeros_like(mask)
        gate_in = torch.randn(2, 2, 4, 4, dtype=torch.float64)
        gate_out = torch.randn(1, 2, 4, 4, dtype=torch.float64)
        with pytest.raises(ValueError):
            edge_attention_gate(mask, edge, gate_in, gate_out, stride=2, padding=1)


class TestEdgeLfamLayer:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(41)
        feat = rng.standard_normal((1, 3, 8, 8))
        mask = (rng.random((1, 1, 8, 8)) > 0.4).astype(np.float64)
        edge = (rng.random((1, 1, 8, 8)) > 0.85).astype(np.float64)
        w = rng.standard_normal((4, 3, 4, 4)) * 0.2
        k_m = rng.random((1, 1, 4, 4)) * 0.2
        k_e = rng.standard_normal((1, 1, 4, 4)) * 0.3
        gate_in, gate_out = make_gate_kernels(rng)
        kern = EdgeGuidanceKernels(t64(k_m), t64(gate_in), t64(gate_out), t64(k_e))
        p = default_params()
        got = edge_lfam_layer(LayerState(t64(feat), t64(mask), t64(edge)), t64(w),
                              kern, p, stride=2, padding=1)
        want = oracles.edge_lfam_loop(feat, mask, edge, w, k_m, gate_in, gate_out,
                                      k_e, stride=2, padding=1)
        np.testing.assert_allclose(got.feature.detach().numpy(), want[0], atol=1e-10)
        np.testing.assert_allclose(got.mask.detach().numpy(), want[1], atol=1e-12)
        np.testing.assert_allclose(got.edge.detach().numpy(), want[2], atol=1e-10)
        np.testing.assert_allclose(got.attention.detach().numpy(), want[3], atol=1e-12)

    def test_unit_gate_reduces_to_lfam(self):
        rng = np.random.default_rng(42)
        feat = rng.standard_normal((1, 2, 8, 8))
        mask = (rng.random((1, 1, 8, 8)) > 0.4).astype(np.float64)
        edge = rng.random((1, 1, 8, 8))
        w = rng.standard_normal((2, 2, 4, 4)) * 0.3
        k_m = rng.random((1, 1, 4, 4)) * 0.2
        gate_in = np.zeros((2, 2, 4, 4))
        gate_in[:, 0] = 1.0 / 16.0
        gate_out = np.full((1, 2, 3, 3), 100.0)
        k_e = rng.standard_normal((1, 1, 4, 4))
        kern = EdgeGuidanceKernels(t64(k_m), t64(gate_in), t64(gate_out), t64(k_e))
        p = default_params()
        got = edge_lfam_layer(LayerState(t64(feat), t64(mask), t64(edge)), t64(w),
                              kern, p, stride=2, padding=1)
        plain = lfam_layer(t64(feat), t64(mask), t64(w), t64(k_m), p,
                           stride=2, padding=1)
        np.testing.assert_allclose(got.feature.detach().numpy(),
                                   plain.feature.detach().numpy(), atol=1e-12)
        np.testing.assert_allclose(got.mask.detach().numpy(),
                                   plain.mask.detach().numpy(), atol=1e-12)

    def test_zero_gate_blocks_mask_growth(self):
        rng = np.random.default_rng(43)
        feat = rng.standard_normal((1, 2, 8, 8))
        mask = (rng.random((1, 1, 8, 8)) > 0.4).astype(np.float64)
        edge = rng.random((1, 1, 8, 8))
        w = rng.standard_normal((2, 2, 4, 4))
        k_m = rng.random((1, 1, 4, 4)) * 0.2
        gate_in = np.zeros((2, 2, 4, 4))
        gate_in[:, 0] = 1.0 / 16.0
        gate_out = np.full((1, 2, 3, 3), -2000.0)
        k_e = rng.standard_normal((1, 1, 4, 4))
        kern = EdgeGuidanceKernels(t64(k_m), t64(gate_in), t64(gate_out), t64(k_e))
        got = edge_lfam_layer(LayerState(t64(feat), t64(mask), t64(edge)), t64(w),
                              kern, default_params(), stride=2, padding=1)
        assert (got.mask.detach().numpy() == 0.0).all()


class TestLramLayer:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(51)
        enc = rng.standard_normal((1, 3, 6, 6))
        dec = rng.standard_normal((1, 4, 6, 6))
        rev = (rng.random((1, 1, 6, 6)) > 0.5).astype(np.float64)
        att_e = rng.random((1, 1, 6, 6)) * 1.1
        w_e = rng.standard_normal((2, 3, 3, 3)) * 0.3
        w_d = rng.standard_normal((2, 4, 3, 3)) * 0.3
        k = rng.random((1, 1, 3, 3)) * 0.2
        p = default_params()
        got = lram_layer(t64(enc), t64(dec), t64(rev), t64(att_e), t64(w_e),
                         t64(w_d), t64(k), p)
        want = oracles.lram_loop(enc, dec, rev, att_e, w_e, w_d, k)
        np.testing.assert_allclose(got.feature.detach().numpy(), want[0], atol=1e-10)
        np.testing.assert_allclose(got.mask.detach().numpy(), want[1], atol=1e-12)
        np.testing.assert_allclose(got.attention.detach().numpy(), want[2], atol=1e-12)

    def test_zero_decoder_attention_passes_skip_only(self):
        # averaging kernel keeps mc <= 1 < mu, so a huge gamma_l kills the
        # decoder branch exactly (exp underflows to 0)
        rng = np.random.default_rng(52)
        enc = rng.standard_normal((1, 2, 6, 6))
        dec = rng.standard_normal((1, 2, 6, 6))
        rev = rng.random((1, 1, 6, 6))
        att_e = rng.random((1, 1, 6, 6))
        w_e = rng.standard_normal((2, 2, 3, 3))
        w_d = rng.standard_normal((2, 2, 3, 3))
        p = AttentionParams(gamma_l=1e30, dtype=torch.float64)
        got = lram_layer(t64(enc), t64(dec), t64(rev), t64(att_e), t64(w_e),
                         t64(w_d), uniform_kernel(3, dtype=torch.float64), p)
        skip_only = torch.nn.functional.conv2d(t64(enc), t64(w_e), padding=1) * t64(att_e)
        np.testing.assert_allclose(got.feature.detach().numpy(),
                                   skip_only.numpy(), atol=1e-12)

    def test_rejects_attention_shape_mismatch(self):
        enc = torch.randn(1, 2, 6, 6, dtype=torch.float64)
        dec = torch.randn(1, 2, 6, 6, dtype=torch.float64)
        rev = torch.rand(1, 1, 6, 6, dtype=torch.float64)
        att_e = torch.rand(1, 1, 3, 3, dtype=torch.float64)
        w = torch.randn(2, 2, 3, 3, dtype=torch.float64)
        with pytest.raises(ValueError):
            lram_layer(enc, dec, rev, att_e, w, w,
                       uniform_kernel(3, dtype=torch.float64), default_params())

    def test_separate_mask_geometry(self):
        # decoder features get upsampled before the layer, so the mask path
        # may run strided while the feature path does not
        rng = np.random.default_rng(53)
        enc = rng.standard_normal((1, 2, 6, 6))
        dec = rng.standard_normal((1, 2, 6, 6))
        rev = rng.random((1, 1, 12, 12))
        att_e = rng.random((1, 1, 6, 6))
        w_e = rng.standard_normal((2, 2, 3, 3))
        w_d = rng.standard_normal((2, 2, 3, 3))
        k = rng.random((1, 1, 4, 4)) * 0.1
        got = lram_layer(t64(enc), t64(dec), t64(rev), t64(att_e), t64(w_e),
                         t64(w_d), t64(k), default_params(),
                         stride=1, padding=1, mask_stride=2, mask_padding=1)
        assert got.mask.shape == (1, 1, 6, 6)
        want = oracles.lram_loop(enc, dec, rev, att_e, w_e, w_d, k,
                                 mask_stride=2, mask_padding=1)
        np.testing.assert_allclose(got.feature.detach().numpy(), want[0], atol=1e-10)


class TestEdgeLramLayer:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(61)
        enc = rng.standard_normal((1, 3, 6, 6))
        dec = rng.standard_normal((1, 4, 6, 6))
        rev = rng.random((1, 1, 12, 12))
        edge = (rng.random((1, 1, 12, 12)) > 0.8).astype(np.float64)
        att_e = rng.random((1, 1, 6, 6))
        w_e = rng.standard_normal((2, 3, 3, 3)) * 0.3
        w_d = rng.standard_normal((2, 4, 3, 3)) * 0.3
        k_m = rng.random((1, 1, 4, 4)) * 0.1
        k_e = rng.standard_normal((1, 1, 4, 4)) * 0.3
        gate_in, gate_out = make_gate_kernels(rng)
        kern = EdgeGuidanceKernels(t64(k_m), t64(gate_in), t64(gate_out), t64(k_e))
        got = edge_lram_layer(t64(enc), t64(dec), t64(rev), t64(edge), t64(att_e),
                              t64(w_e), t64(w_d), kern, default_params(),
                              stride=1, padding=1, mask_stride=2, mask_padding=1)
        want = oracles.edge_lram_loop(enc, dec, rev, edge, att_e, w_e, w_d, k_m,
                                      gate_in, gate_out, k_e,
                                      mask_stride=2, mask_padding=1)
        np.testing.assert_allclose(got.feature.detach().numpy(), want[0], atol=1e-10)
        np.testing.assert_allclose(got.mask.detach().numpy(), want[1], atol=1e-12)
        np.testing.assert_allclose(got.edge.detach().numpy(), want[2], atol=1e-10)
        np.testing.assert_allclose(got.attention.detach().numpy(), want[3], atol=1e-12)

    def test_rejects_mask_edge_mismatch(self):
        rng = np.random.default_rng(62)
        t = lambda *s: torch.randn(*s, dtype=torch.float64)
        kern = EdgeGuidanceKernels(t(1, 1, 4, 4), t(2, 2, 4, 4), t(1, 2, 3, 3),
                                   t(1, 1, 4, 4))
        with pytest.raises(ValueError):
            edge_lram_layer(t(1, 2, 6, 6), t(1, 2, 6, 6), torch.rand(1, 1, 12, 12,
                            dtype=torch.float64), torch.rand(1, 1, 6, 6,
                            dtype=torch.float64), torch.rand(1, 1, 6, 6,
                            dtype=torch.float64), t(2, 2, 3, 3), t(2, 2, 3, 3),
                            kern, default_params(), mask_stride=2, mask_padding=1)


class TestMaskPropagation:
    def test_hard_mask_fills_within_diameter(self):
        # 3x3 neighborhood updating grows the known set by one pixel per step
        h = w = 16
        mask = torch.zeros(1, 1, h, w, dtype=torch.float64)
        mask[0, 0, 0, 0] = 1.0
        k = uniform_kernel(3, dtype=torch.float64)
        for _ in range(max(h, w)):
            mask = hard_mask_update(convolve_mask(mask, k, padding=1))
        assert (mask == 1.0).all()

    def test_soft_mask_grows_into_holes(self):
        # zero padding caps border values below 1, so assert growth plus
        # near-saturation at the hole center rather than a global mean
        mask = torch.ones(1, 1, 16, 16, dtype=torch.float64)
        mask[:, :, 5:11, 5:11] = 0.0
        k = uniform_kernel(3, dtype=torch.float64)
        alpha = 0.8
        hole = mask == 0.0
        hole_means = []
        m = mask.clone()
        for _ in range(10):
            m = soft_mask_update(convolve_mask(m, k, padding=1), alpha)
            hole_means.append(m[hole].mean().item())
        assert all(b > a for a, b in zip(hole_means, hole_means[1:]))
        assert m[0, 0, 8, 8].item() > 0.85
