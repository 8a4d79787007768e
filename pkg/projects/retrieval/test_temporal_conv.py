"""
Tests for dilated convolution and SMSDC (Retrieval Project, Level 2)
Run: pytest test_temporal_conv.py -k "TestLevel1" -v
"""

import numpy as np
import pytest

from errors import ConfigError, DimensionError
from tensor import Tensor, grad_check
from temporal_conv import (SMSDC, DilatedKernel, SmsdcConfig, activate_and_pool, dilated_conv1d,
                           msdc, receptive_field, smsdc, tap_offsets)


def kernel(w, r, d, weights=None, bias=None, seed=0, centered=False):
    k = DilatedKernel(w, r, d, np.random.default_rng(seed), centered)
    if weights is not None:
        k.weights.data[...] = weights
    if bias is not None:
        k.bias.data[...] = bias
    return k


def naive_conv(F, W, b, r):
    """Double loop over (t, i) with explicit zero padding past the end."""
    L, d = F.shape
    out = np.zeros((L, d))
    for t in range(L):
        out[t] = b
        for i in range(1, W.shape[0] + 1):
            row = F[t + r * i] if t + r * i < L else np.zeros(d)
            out[t] += row @ W[i - 1]
    return out


# ============================================================
# Level 1: Dilated convolution
# ============================================================

class TestLevel1:
    def test_unit_shift(self):
        F = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        k = kernel(1, 1, 2, weights=np.eye(2)[None], bias=np.zeros(2))
        assert dilated_conv1d(Tensor(F), k).data.tolist() == [[3, 4], [5, 6], [0, 0]]

    def test_zero_weights(self):
        k = kernel(3, 2, 2, weights=np.zeros((3, 2, 2)), bias=np.zeros(2))
        out = dilated_conv1d(Tensor(np.ones((5, 2))), k)
        assert out.shape == (5, 2)
        assert np.all(out.data == 0.0)

    def test_hand_example(self):
        k = kernel(2, 2, 1, weights=np.array([[[2.0]], [[3.0]]]), bias=np.zeros(1))
        out = dilated_conv1d(Tensor([[1.0], [2.0], [3.0], [4.0]]), k)
        assert out.data[:, 0].tolist() == [6.0, 8.0, 0.0, 0.0]

    def test_matches_double_loop_oracle(self):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            for L in range(1, 7):
                for d in (1, 2, 3):
                    w, r = int(rng.integers(1, 5)), int(rng.integers(1, 4))
                    F = rng.standard_normal((L, d))
                    k = kernel(w, r, d, seed=seed)
                    expected = naive_conv(F, k.weights.data, k.bias.data, r)
                    assert np.allclose(dilated_conv1d(Tensor(F), k).data, expected, atol=1e-12, rtol=0)

    def test_length_preserved_for_every_kernel(self):
        F = Tensor(np.random.default_rng(1).standard_normal((3, 2)))
        for w in range(1, 5):
            for r in range(1, 4):
                assert dilated_conv1d(F, kernel(w, r, 2)).shape == (3, 2)

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            dilated_conv1d(Tensor(np.ones((4, 3))), kernel(2, 1, 2))

    def test_receptive_field(self):
        assert receptive_field(2, 1) == (1, 2)
        assert receptive_field(5, 2) == (2, 10)
        assert receptive_field(1, 3) == (3, 3)

    def test_receptive_field_centered(self):
        assert receptive_field(3, 1, centered=True) == (-1, 1)
        assert receptive_field(2, 2, centered=True) == (0, 2)

    def test_receptive_field_rejects_zero(self):
        with pytest.raises(ConfigError):
            receptive_field(0, 1)

    def test_centered_taps_read_behind(self):
        assert tap_offsets(3, 2, centered=True).tolist() == [-2, 0, 2]
        F = np.array([[1.0], [2.0], [3.0]])
        k = kernel(3, 1, 1, weights=np.array([[[1.0]], [[10.0]], [[100.0]]]), bias=np.zeros(1), centered=True)
        # taps at t-1, t, t+1 with zeros outside
        assert dilated_conv1d(Tensor(F), k).data[:, 0].tolist() == [210.0, 321.0, 32.0]


# ============================================================
# Level 2: Multi-scale branches and pooling
# ============================================================

class TestLevel2:
    def test_grid_order(self):
        assert SmsdcConfig(3, 2, 4).grid() == [(1, 2), (1, 3), (1, 4), (2, 2), (2, 3), (2, 4)]

    def test_single_branch_equals_conv(self):
        cfg = SmsdcConfig(1, 1, 2)
        k = kernel(2, 1, 2, seed=3)
        F = Tensor(np.random.default_rng(3).standard_normal((4, 2)))
        assert np.array_equal(msdc(F, cfg, [k]).data[0], dilated_conv1d(F, k).data)

    def test_msdc_stack_shape(self):
        cfg = SmsdcConfig(3, 2, 5)
        bank = [kernel(w, r, 5, seed=i) for i, (r, w) in enumerate(cfg.grid())]
        assert msdc(Tensor(np.ones((7, 5))), cfg, bank).shape == (6, 7, 5)

    def test_full_size_branch_counts(self):
        assert SmsdcConfig(4, 2, 1024).branches == 8
        assert SmsdcConfig(3, 2, 768).branches == 6

    def test_bank_mismatch(self):
        cfg = SmsdcConfig(2, 1, 2)
        with pytest.raises(ConfigError):
            msdc(Tensor(np.ones((3, 2))), cfg, [kernel(3, 1, 2), kernel(2, 1, 2)])

    def test_pool_relu_max(self):
        S = Tensor([[[-1.0], [2.0], [0.0]]])
        assert activate_and_pool(S, "relu").data.tolist() == [[2.0]]

    def test_pool_all_negative(self):
        S = Tensor([[[-1.0], [-2.0]]])
        assert activate_and_pool(S, "relu").data.tolist() == [[0.0]]

    def test_pool_matches_loop_oracle(self):
        S = np.random.default_rng(5).standard_normal((2, 5, 3))
        expected = np.zeros((2, 3))
        for b in range(2):
            for c in range(3):
                expected[b, c] = max(max(v, 0.0) for v in S[b, :, c])
        assert np.array_equal(activate_and_pool(Tensor(S), "relu").data, expected)

    def test_pool_time_permutation_invariant(self):
        rng = np.random.default_rng(6)
        S = rng.standard_normal((3, 6, 2))
        perm = rng.permutation(6)
        for sigma in ("relu", "tanh", "identity"):
            assert np.array_equal(activate_and_pool(Tensor(S), sigma).data,
                                  activate_and_pool(Tensor(S[:, perm]), sigma).data)

    def test_unknown_sigma(self):
        with pytest.raises(ConfigError):
            SmsdcConfig(2, 2, 3, sigma="gelu")


# ============================================================
# Level 3: Stacked MSDC
# ============================================================

class TestLevel3:
    def test_output_width(self):
        for n, m, d in [(1, 1, 1), (2, 3, 4), (4, 2, 3)]:
            module = SMSDC(SmsdcConfig(n, m, d), np.random.default_rng(0))
            out = module(Tensor(np.random.default_rng(1).standard_normal((5, d))))
            assert out.shape == (n * m * d,)

    def test_full_size_widths(self):
        assert SmsdcConfig(4, 2, 1024).out_width == 8192
        assert SmsdcConfig(3, 2, 768).out_width == 4608

    def test_zero_weights_and_biases(self):
        module = SMSDC(SmsdcConfig(2, 2, 3), np.random.default_rng(0))
        for p in module.parameters():
            p.data[...] = 0.0
        out = module(Tensor(np.random.default_rng(2).standard_normal((4, 3))))
        assert np.all(out.data == 0.0)

    def test_zero_stage_one_leaves_stage_two_biases(self):
        module = SMSDC(SmsdcConfig(2, 1, 2), np.random.default_rng(0))
        for k in module.stage1:
            k.weights.data[...] = 0.0
            k.bias.data[...] = 0.0
        for k in module.stage2:
            k.bias.data[...] = [0.5, -0.5]
        out = module(Tensor(np.random.default_rng(3).standard_normal((4, 2))))
        assert out.data.tolist() == [0.5, 0.0, 0.5, 0.0]

    def test_deterministic_under_seed(self):
        F = Tensor(np.random.default_rng(4).standard_normal((6, 3)))
        a = SMSDC(SmsdcConfig(2, 2, 3), np.random.default_rng(9))(F).data
        b = SMSDC(SmsdcConfig(2, 2, 3), np.random.default_rng(9))(F).data
        assert a.tobytes() == b.tobytes()

    def test_stage_one_linear_with_identity(self):
        cfg = SmsdcConfig(2, 2, 3, sigma="identity")
        module = SMSDC(cfg, np.random.default_rng(0))
        for k in module.stage1:
            k.bias.data[...] = 0.0
        rng = np.random.default_rng(5)
        for _ in range(5):
            x, y = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
            a, b = rng.standard_normal(2)
            lhs = msdc(Tensor(a * x + b * y), cfg, module.stage1).data
            rhs = a * msdc(Tensor(x), cfg, module.stage1).data + b * msdc(Tensor(y), cfg, module.stage1).data
            assert np.allclose(lhs, rhs, atol=1e-12)

    def test_unstacked_runs_one_stage(self):
        cfg = SmsdcConfig(2, 2, 3, stacked=False)
        module = SMSDC(cfg, np.random.default_rng(0))
        assert module.stage2 == []
        F = Tensor(np.random.default_rng(6).standard_normal((5, 3)))
        expected = activate_and_pool(msdc(F, cfg, module.stage1), "relu").data.reshape(-1)
        assert np.array_equal(module(F).data, expected)

    def test_functional_form_matches_module(self):
        cfg = SmsdcConfig(2, 2, 3)
        module = SMSDC(cfg, np.random.default_rng(0))
        F = Tensor(np.random.default_rng(7).standard_normal((5, 3)))
        assert np.array_equal(smsdc(F, cfg, module.stage1, module.stage2).data, module(F).data)

    @pytest.mark.parametrize("seed", range(3))
    def test_grad_check(self, seed):
        rng = np.random.default_rng(seed)
        module = SMSDC(SmsdcConfig(2, 2, 3, sigma="tanh"), rng)
        F = Tensor(rng.standard_normal((5, 3)))
        assert grad_check(lambda F, *ps: module(F), [F, *module.parameters()], seed=seed) < 1e-4

    def test_matches_torch_conv1d(self):
        torch = pytest.importorskip("torch")
        rng = np.random.default_rng(8)
        L, d, w, r = 6, 3, 3, 2
        F = rng.standard_normal((L, d))
        k = kernel(w, r, d, seed=8)
        # forward taps r..wr equal a dilated conv over F padded by wr rows, shifted by r
        padded = np.vstack([F[r:], np.zeros((w * r, d))])[None].transpose(0, 2, 1)
        weight = np.transpose(k.weights.data, (2, 1, 0))
        ref = torch.nn.functional.conv1d(torch.tensor(padded), torch.tensor(weight),
                                         torch.tensor(k.bias.data), dilation=r)[0].numpy().T[:L]
        assert np.allclose(dilated_conv1d(Tensor(F), k).data, ref, atol=1e-12)
