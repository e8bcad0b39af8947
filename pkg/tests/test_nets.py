import math

import numpy as np
import pytest
import torch

from c2tse.metrics import si_sdr
from c2tse.nets import (
    SI_SDR_REL_EPS,
    TransformerLayer,
    TransformerStack,
    si_sdr_torch,
    sinusoidal_encoding,
)


class TestSinusoidalEncoding:
    def test_shape_and_range(self):
        tab = sinusoidal_encoding(50, 64)
        assert tab.shape == (50, 64)
        assert tab.abs().max() <= 1.0

    def test_first_position_values(self):
        tab = sinusoidal_encoding(4, 8)
        # position 0: sin(0)=0 on even columns, cos(0)=1 on odd columns
        assert torch.all(tab[0, 0::2] == 0.0)
        assert torch.all(tab[0, 1::2] == 1.0)

    def test_column_zero_is_plain_sine(self):
        tab = sinusoidal_encoding(10, 8)
        want = torch.sin(torch.arange(10, dtype=torch.float32))
        torch.testing.assert_close(tab[:, 0], want)

    def test_positions_distinct(self):
        tab = sinusoidal_encoding(100, 32)
        dists = torch.cdist(tab, tab) + torch.eye(100) * 99
        assert dists.min() > 1e-3

    def test_odd_width(self):
        tab = sinusoidal_encoding(5, 7)
        assert tab.shape == (5, 7)
        assert torch.isfinite(tab).all()


class TestTransformerBlocks:
    def test_layer_shape_preserved(self):
        torch.manual_seed(0)
        layer = TransformerLayer(16, 2)
        h = torch.randn(3, 11, 16)
        assert layer(h).shape == (3, 11, 16)

    def test_stack_shape_and_norm(self):
        torch.manual_seed(0)
        stack = TransformerStack(16, layers=2, heads=2)
        out = stack(torch.randn(2, 9, 16))
        assert out.shape == (2, 9, 16)
        # closing LayerNorm: per-position mean ~0, var ~1
        assert out.mean(dim=-1).abs().max() < 1e-5
        assert (out.var(dim=-1, unbiased=False) - 1.0).abs().max() < 1e-3

    def test_position_sensitivity(self):
        # swapping two time steps must change the output somewhere
        torch.manual_seed(1)
        stack = TransformerStack(16, layers=1, heads=2)
        h = torch.randn(1, 6, 16)
        perm = h[:, [1, 0, 2, 3, 4, 5], :]
        assert not torch.allclose(stack(h), stack(perm))

    def test_gradients_flow(self):
        torch.manual_seed(2)
        stack = TransformerStack(8, layers=1, heads=1)
        h = torch.randn(1, 5, 8, requires_grad=True)
        stack(h).sum().backward()
        assert h.grad is not None
        assert h.grad.abs().sum() > 0


class TestSiSdrTorch:
    def test_matches_numpy_in_bulk(self):
        rng = np.random.default_rng(0)
        est = rng.normal(size=(6, 500))
        ref = rng.normal(size=(6, 500))
        got = si_sdr_torch(torch.tensor(est), torch.tensor(ref))
        for i in range(6):
            want = si_sdr(est[i], ref[i])
            assert got[i].item() == pytest.approx(want, abs=1e-6)

    def test_perfect_saturates_at_80db(self):
        x = torch.randn(2, 300, dtype=torch.float64)
        got = si_sdr_torch(x, x)
        want = 10.0 * math.log10(1.0 / SI_SDR_REL_EPS)
        torch.testing.assert_close(got, torch.full((2,), want, dtype=torch.float64))

    def test_batch_shape(self):
        out = si_sdr_torch(torch.randn(5, 100), torch.randn(5, 100))
        assert out.shape == (5,)

    def test_differentiable_near_perfect(self):
        ref = torch.randn(1, 200, dtype=torch.float64)
        est = (ref + 1e-4 * torch.randn(1, 200, dtype=torch.float64)).requires_grad_()
        loss = -si_sdr_torch(est, ref).mean()
        loss.backward()
        assert torch.isfinite(est.grad).all()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            si_sdr_torch(torch.randn(2, 10), torch.randn(2, 11))

    def test_scale_invariance(self):
        ref = torch.randn(3, 400, dtype=torch.float64)
        est = ref + 0.1 * torch.randn(3, 400, dtype=torch.float64)
        torch.testing.assert_close(si_sdr_torch(3.7 * est, ref), si_sdr_torch(est, ref))
