"""Noise schedule, masked forward process, and masked loss."""

from __future__ import annotations

import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from storydesk.errors import (ConfigurationError, DegenerateMaskError,
                              LayoutError, RangeError)
from storydesk.layout import (FrameMask, LatentStoryboard, StoryboardLayout,
                              pixel_mask)
from storydesk.schedule import (make_linear_schedule, masked_forward,
                                masked_forward_batch, masked_loss,
                                masked_loss_batch)

LAYOUT = StoryboardLayout(num_frames=4, grid_rows=2, grid_cols=2,
                          frame_height=8, frame_width=8, channels=3)

# Running product of (1 - beta_t) over the float64 linspace grid, computed
# independently with exact rational arithmetic and frozen here.
ALPHA_BAR_1000_FROZEN = 4.035829765375685e-05


def random_board(seed: int) -> LatentStoryboard:
    g = torch.Generator().manual_seed(seed)
    return LatentStoryboard(torch.randn(LAYOUT.canvas_shape, generator=g),
                            LAYOUT)


class TestMakeLinearSchedule:
    def test_alpha_bar_first_step(self):
        s = make_linear_schedule(1000, 1e-4, 0.02)
        assert s.alpha_bar(1) == pytest.approx(0.9999, abs=1e-12)

    def test_alpha_bar_last_step_frozen_oracle(self):
        s = make_linear_schedule(1000, 1e-4, 0.02)
        assert s.alpha_bar(1000) == pytest.approx(4.0e-5, abs=1e-6)
        assert s.alpha_bar(1000) == pytest.approx(ALPHA_BAR_1000_FROZEN,
                                                  rel=1e-12)

    def test_running_product_against_log_sum(self):
        s = make_linear_schedule(250, 3e-4, 0.015)
        for t in (1, 7, 100, 250):
            expected = math.exp(
                math.fsum(math.log1p(-s.beta(u)) for u in range(1, t + 1))
            )
            assert s.alpha_bar(t) == pytest.approx(expected, rel=1e-12)

    def test_single_step_schedule(self):
        s = make_linear_schedule(1, 0.5, 0.5)
        assert s.num_steps == 1
        assert s.beta(1) == 0.5
        assert s.alpha_bar(1) == 0.5

    def test_endpoints_inclusive(self):
        s = make_linear_schedule(10, 1e-4, 0.02)
        assert s.beta(1) == pytest.approx(1e-4, rel=1e-12)
        assert s.beta(10) == pytest.approx(0.02, rel=1e-12)

    def test_alpha_bar_strictly_decreasing(self):
        s = make_linear_schedule(1000, 1e-4, 0.02)
        for t in range(1, 1000):
            assert s.alpha_bar(t + 1) < s.alpha_bar(t)
        assert 0 < s.alpha_bar(1000) < s.alpha_bar(1) < 1

    def test_invalid_ranges_rejected(self):
        with pytest.raises(ConfigurationError):
            make_linear_schedule(0, 1e-4, 0.02)
        with pytest.raises(ConfigurationError):
            make_linear_schedule(10, 0.0, 0.02)
        with pytest.raises(ConfigurationError):
            make_linear_schedule(10, 0.02, 1e-4)
        with pytest.raises(ConfigurationError):
            make_linear_schedule(10, 1e-4, 1.0)

    def test_spec_round_trip(self):
        from storydesk.schedule import NoiseSchedule
        s = make_linear_schedule(100, 1e-4, 0.02)
        again = NoiseSchedule.from_spec(s.spec())
        assert again.num_steps == s.num_steps
        assert again.alpha_bar(100) == s.alpha_bar(100)

    def test_alpha_bar_zero_is_one(self):
        s = make_linear_schedule(100, 1e-4, 0.02)
        assert s.alpha_bar(0) == 1.0


class TestMaskedForward:
    def test_all_ones_reduces_to_standard_forward(self):
        s = make_linear_schedule(100, 1e-4, 0.02)
        x0 = random_board(0)
        eps = torch.randn(LAYOUT.canvas_shape,
                          generator=torch.Generator().manual_seed(1))
        pm = pixel_mask(FrameMask.full(4), LAYOUT)
        t = 37
        out = masked_forward(x0, pm, t, eps, s)
        ab = s.alpha_bar(t)
        expected = (
            torch.tensor(ab ** 0.5, dtype=torch.float64) * x0.data.double()
            + torch.tensor((1 - ab) ** 0.5, dtype=torch.float64) * eps.double()
        ).float()
        assert torch.allclose(out.data, expected, atol=1e-6)

    def test_all_zeros_is_identity(self):
        s = make_linear_schedule(100, 1e-4, 0.02)
        x0 = random_board(0)
        eps = torch.randn(LAYOUT.canvas_shape,
                          generator=torch.Generator().manual_seed(1))
        pm = torch.zeros(LAYOUT.canvas_shape)
        out = masked_forward(x0, pm, 50, eps, s)
        assert torch.equal(out.data, x0.data)

    def test_zero_signal_case(self):
        s = make_linear_schedule(100, 1e-4, 0.02)
        x0 = LatentStoryboard(torch.zeros(LAYOUT.canvas_shape), LAYOUT)
        eps = torch.randn(LAYOUT.canvas_shape,
                          generator=torch.Generator().manual_seed(1))
        pm = pixel_mask(FrameMask.full(4), LAYOUT)
        t = 100
        out = masked_forward(x0, pm, t, eps, s)
        scale = (1 - s.alpha_bar(t)) ** 0.5
        assert torch.allclose(out.data, (eps.double() * scale).float(),
                              atol=1e-6)

    def test_t_out_of_range(self):
        s = make_linear_schedule(100, 1e-4, 0.02)
        x0 = random_board(0)
        eps = torch.zeros(LAYOUT.canvas_shape)
        pm = pixel_mask(FrameMask.full(4), LAYOUT)
        with pytest.raises(RangeError):
            masked_forward(x0, pm, 0, eps, s)
        with pytest.raises(RangeError):
            masked_forward(x0, pm, 101, eps, s)

    def test_shape_mismatch(self):
        s = make_linear_schedule(100, 1e-4, 0.02)
        x0 = random_board(0)
        pm = pixel_mask(FrameMask.full(4), LAYOUT)
        with pytest.raises(LayoutError):
            masked_forward(x0, pm, 5, torch.zeros(3, 8, 8), s)

    @settings(max_examples=40)
    @given(seed=st.integers(0, 2**31 - 1), t=st.integers(1, 100),
           bits=st.lists(st.booleans(), min_size=4, max_size=4))
    def test_unmasked_pixels_bit_exact(self, seed, t, bits):
        s = make_linear_schedule(100, 1e-4, 0.02)
        x0 = random_board(seed)
        g = torch.Generator().manual_seed(seed + 1)
        eps = torch.randn(LAYOUT.canvas_shape, generator=g)
        pm = pixel_mask(FrameMask(tuple(bits)), LAYOUT)
        out = masked_forward(x0, pm, t, eps, s)
        keep = pm == 0
        assert torch.equal(out.data[keep], x0.data[keep])

    def test_masked_variance_matches_schedule(self):
        # x0 = 0, unit eps: Var(x_t) over masked pixels == 1 - alpha_bar(t)
        s = make_linear_schedule(100, 1e-4, 0.02)
        t = 60
        n = 100_000
        g = torch.Generator().manual_seed(9)
        layout = StoryboardLayout(num_frames=1, grid_rows=1, grid_cols=1,
                                  frame_height=1, frame_width=1, channels=1)
        x0 = LatentStoryboard(torch.zeros(1, 1, 1), layout)
        pm = torch.ones(1, 1, 1)
        samples = torch.empty(n)
        eps = torch.randn(n, generator=g)
        for i in range(n):
            out = masked_forward(x0, pm, t, eps[i].reshape(1, 1, 1), s)
            samples[i] = out.data.item()
        target = 1.0 - s.alpha_bar(t)
        assert samples.var().item() == pytest.approx(target, rel=0.05)

    def test_batched_matches_single(self):
        s = make_linear_schedule(100, 1e-4, 0.02)
        boards = [random_board(i) for i in range(3)]
        eps = torch.randn(3, *LAYOUT.canvas_shape,
                          generator=torch.Generator().manual_seed(5))
        masks = [FrameMask.full(4), FrameMask((True, False, False, True)),
                 FrameMask((False, True, True, True))]
        pms = torch.stack([pixel_mask(m, LAYOUT) for m in masks])
        ts = torch.tensor([3, 50, 100])
        x0 = torch.stack([b.data for b in boards])
        out = masked_forward_batch(x0, eps, pms, ts, s)
        for i in range(3):
            single = masked_forward(boards[i], pms[i], int(ts[i]), eps[i], s)
            assert torch.equal(out[i], single.data)


class TestMaskedLoss:
    def test_perfect_prediction_is_zero(self):
        eps = torch.randn(3, 8, 8, generator=torch.Generator().manual_seed(0))
        m = torch.ones(3, 8, 8)
        assert masked_loss(eps, eps, m) == 0.0

    def test_constant_residual_full_mask(self):
        for k in (0.5, -2.0, 3.25):
            eps = torch.zeros(3, 8, 8)
            pred = torch.full((3, 8, 8), -k)
            m = torch.ones(3, 8, 8)
            assert masked_loss(eps, pred, m) == pytest.approx(k * k, rel=1e-6)

    def test_unmasked_perturbation_invariance(self):
        g = torch.Generator().manual_seed(3)
        eps = torch.randn(3, 8, 8, generator=g)
        pred = torch.randn(3, 8, 8, generator=g)
        m = torch.zeros(3, 8, 8)
        m[:, :4, :] = 1.0
        base = masked_loss(eps, pred, m)
        delta = torch.randn(3, 8, 8, generator=g) * 100.0
        perturbed = pred + delta * (1.0 - m)
        assert masked_loss(eps, perturbed, m) == base

    def test_all_zero_mask_rejected(self):
        eps = torch.zeros(3, 8, 8)
        with pytest.raises(DegenerateMaskError):
            masked_loss(eps, eps, torch.zeros(3, 8, 8))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(LayoutError):
            masked_loss(torch.zeros(3, 8, 8), torch.zeros(3, 8, 8),
                        torch.zeros(3, 4, 8))

    def test_normalized_by_masked_count(self):
        # residual 2 on a half-masked grid: mean of squares over mask = 4
        eps = torch.zeros(1, 2, 2)
        pred = torch.full((1, 2, 2), 2.0)
        m = torch.tensor([[[1.0, 1.0], [0.0, 0.0]]])
        assert masked_loss(eps, pred, m) == pytest.approx(4.0)

    def test_batch_names_degenerate_sample(self):
        eps = torch.zeros(2, 1, 2, 2)
        m = torch.ones(2, 1, 2, 2)
        m[1] = 0.0
        with pytest.raises(DegenerateMaskError, match="1"):
            masked_loss_batch(eps, eps, m)

    def test_batch_mean_of_per_sample_losses(self):
        eps = torch.zeros(2, 1, 2, 2)
        pred = torch.stack([torch.full((1, 2, 2), 1.0),
                            torch.full((1, 2, 2), 3.0)])
        m = torch.ones(2, 1, 2, 2)
        loss = masked_loss_batch(eps, pred, m)
        assert float(loss) == pytest.approx((1.0 + 9.0) / 2)

    @settings(max_examples=30)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_loss_depends_only_on_masked_residual(self, seed):
        g = torch.Generator().manual_seed(seed)
        eps = torch.randn(3, 4, 4, generator=g)
        pred = torch.randn(3, 4, 4, generator=g)
        m = (torch.rand(3, 4, 4, generator=g) > 0.5).float()
        if m.sum() == 0:
            m[0, 0, 0] = 1.0
        delta = torch.randn(3, 4, 4, generator=g)
        assert masked_loss(eps, pred + delta * (1 - m), m) == \
            masked_loss(eps, pred, m)
