"""Masked reverse diffusion: init blend, guidance algebra, preservation."""

from __future__ import annotations

import random

import pytest
import torch
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from storydesk.captions import (
    ACTIONS,
    BACKGROUNDS,
    CHARACTER_COLORS,
    SHAPES,
    Caption,
)
from storydesk.errors import (
    ConfigurationError,
    DegenerateMaskError,
    NumericError,
)
from storydesk.layout import FrameMask, LatentStoryboard, pixel_mask
from storydesk.model import build_story_model
from storydesk.sampler import (
    SamplerConfig,
    cfg_predict,
    ddim_masked_sample,
    ddim_masked_sample_batch,
    init_masked,
    select_timesteps,
)


def rand(shape, seed, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=g, dtype=dtype)


def make_story(layout, seed=0):
    rng = random.Random(seed)
    return [
        Caption(shape=rng.choice(SHAPES), color=rng.choice(CHARACTER_COLORS),
                action=rng.choice(ACTIONS), background=rng.choice(BACKGROUNDS))
        for _ in range(layout.num_frames)
    ]


def make_board(layout, seed=0):
    return LatentStoryboard(rand((layout.channels, layout.canvas_height,
                                  layout.canvas_width), seed), layout)


@pytest.fixture(scope="module")
def noisy_model(tiny_config):
    """Tiny model with every parameter randomized, so predictions are
    nontrivial and all conditioning paths are live."""
    model = build_story_model(tiny_config, seed=5)
    g = torch.Generator().manual_seed(6)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.1)
    model.eval()
    return model


class TestSamplerConfig:
    def test_defaults(self):
        cfg = SamplerConfig()
        assert (cfg.steps, cfg.guidance_scale, cfg.eta) == (50, 6.0, 0.0)
        assert cfg.renoise_given is False

    def test_bounds(self):
        with pytest.raises(ConfigurationError, match="steps"):
            SamplerConfig(steps=0)
        with pytest.raises(ConfigurationError, match="guidance"):
            SamplerConfig(guidance_scale=-0.5)
        with pytest.raises(ConfigurationError, match="eta"):
            SamplerConfig(eta=1.5)


class TestSelectTimesteps:
    def test_single_step_is_final_timestep(self):
        assert select_timesteps(1000, 1) == [1000]

    def test_full_range(self):
        assert select_timesteps(5, 5) == [5, 4, 3, 2, 1]

    def test_standard_case(self):
        chosen = select_timesteps(1000, 50)
        assert len(chosen) == 50
        assert chosen[0] == 1000 and chosen[-1] == 1

    def test_bounds(self):
        with pytest.raises(ConfigurationError):
            select_timesteps(100, 0)
        with pytest.raises(ConfigurationError):
            select_timesteps(100, 101)

    @settings(max_examples=100, deadline=None)
    @given(st.data())
    def test_strictly_decreasing_within_range(self, data):
        t = data.draw(st.integers(1, 1500))
        s = data.draw(st.integers(1, min(t, 200)))
        chosen = select_timesteps(t, s)
        assert len(chosen) == s
        assert chosen[0] == t
        if s > 1:
            assert chosen[-1] == 1
        assert all(a > b for a, b in zip(chosen, chosen[1:]))
        assert all(1 <= v <= t for v in chosen)


class TestInitMasked:
    def test_all_false_permissive_returns_content(self, tiny_layout):
        board = make_board(tiny_layout, seed=1)
        mask = torch.zeros(tiny_layout.canvas_shape)
        out = init_masked(board, mask, permissive=True)
        assert torch.equal(out.data, board.data)
        assert out.data is not board.data

    def test_all_false_rejected_by_default(self, tiny_layout):
        board = make_board(tiny_layout, seed=1)
        with pytest.raises(DegenerateMaskError):
            init_masked(board, torch.zeros(tiny_layout.canvas_shape))

    def test_all_true_is_pure_noise(self, tiny_layout):
        board = make_board(tiny_layout, seed=2)
        gen = torch.Generator().manual_seed(7)
        out = init_masked(board, torch.ones(tiny_layout.canvas_shape), gen)
        expected = torch.randn(board.data.shape,
                               generator=torch.Generator().manual_seed(7))
        assert torch.equal(out.data, expected)

    def test_partial_mask_blends_bit_exactly(self, tiny_layout):
        board = make_board(tiny_layout, seed=3)
        fm = FrameMask.from_string("1010")
        pm = pixel_mask(fm, tiny_layout)
        gen = torch.Generator().manual_seed(9)
        out = init_masked(board, pm, gen)
        noise = torch.randn(board.data.shape,
                            generator=torch.Generator().manual_seed(9))
        for i, bit in enumerate(fm.bits):
            rs, cs = tiny_layout.frame_region(i)
            want = noise if bit else board.data
            assert torch.equal(out.data[:, rs, cs], want[:, rs, cs])


class _CountingStub:
    """Stands in for the model inside cfg_predict; returns a fixed tensor per
    words object and records every invocation."""

    def __init__(self, table):
        self.table = table
        self.calls = 0

    def predict_noise_batch(self, x_t, t, words, context):
        self.calls += 1
        return self.table[id(words)]


class TestCfgPredict:
    def setup_method(self):
        self.x = rand((1, 3, 8, 8), 20)
        self.t = torch.tensor([50])
        self.wc, self.wn = object(), object()
        self.eps_cond = rand((1, 3, 8, 8), 21)
        self.eps_null = rand((1, 3, 8, 8), 22)
        self.stub = _CountingStub({id(self.wc): self.eps_cond,
                                   id(self.wn): self.eps_null})

    def run(self, w):
        return cfg_predict(self.stub, self.x, self.t, self.wc, self.wn,
                           None, None, w)

    def test_weight_one_is_conditional_only(self):
        out = self.run(1.0)
        assert torch.equal(out, self.eps_cond)
        assert self.stub.calls == 1

    def test_weight_zero_is_unconditional_only(self):
        out = self.run(0.0)
        assert torch.equal(out, self.eps_null)
        assert self.stub.calls == 1

    def test_guidance_algebra(self):
        out = self.run(6.0)
        want = self.eps_null + 6.0 * (self.eps_cond - self.eps_null)
        assert torch.equal(out, want)
        assert self.stub.calls == 2

    def test_equal_branches_collapse(self):
        stub = _CountingStub({id(self.wc): self.eps_cond,
                              id(self.wn): self.eps_cond})
        for w in (0.0, 0.5, 1.0, 6.0):
            out = cfg_predict(stub, self.x, self.t, self.wc, self.wn,
                              None, None, w)
            assert torch.equal(out, self.eps_cond)


class TestMaskedSample:
    def test_mask_length_mismatch(self, tiny_model, tiny_layout):
        board = make_board(tiny_layout)
        with pytest.raises(ConfigurationError, match="mask covers"):
            ddim_masked_sample(tiny_model, board, FrameMask.from_string("101"),
                               make_story(tiny_layout), SamplerConfig(steps=2))

    def test_caption_count_mismatch(self, tiny_model, tiny_layout):
        board = make_board(tiny_layout)
        with pytest.raises(ConfigurationError, match="captions"):
            ddim_masked_sample(tiny_model, board, FrameMask.full(4),
                               make_story(tiny_layout)[:3],
                               SamplerConfig(steps=2))

    def test_all_false_mask_never_touches_model(self, tiny_model, tiny_layout,
                                                monkeypatch):
        board = make_board(tiny_layout, seed=4)

        def boom(*args, **kwargs):
            raise AssertionError("model invoked for an all-false mask")

        monkeypatch.setattr(tiny_model, "predict_noise_batch", boom)
        monkeypatch.setattr(tiny_model, "encode_captions", boom)
        out = ddim_masked_sample(tiny_model, board,
                                 FrameMask.from_string("0000"),
                                 make_story(tiny_layout), SamplerConfig())
        assert torch.equal(out.data, board.data)
        assert out.data is not board.data

    def test_fixed_seed_is_bit_identical(self, noisy_model, tiny_layout):
        board = make_board(tiny_layout, seed=5)
        cfg = SamplerConfig(steps=4, seed=11)
        story = make_story(tiny_layout, seed=1)
        mask = FrameMask.from_string("1101")
        a = ddim_masked_sample(noisy_model, board, mask, story, cfg)
        b = ddim_masked_sample(noisy_model, board, mask, story, cfg)
        assert torch.equal(a.data, b.data)

    def test_seed_changes_generated_frames_only(self, noisy_model, tiny_layout):
        board = make_board(tiny_layout, seed=5)
        story = make_story(tiny_layout, seed=1)
        mask = FrameMask.from_string("0110")
        a = ddim_masked_sample(noisy_model, board, mask, story,
                               SamplerConfig(steps=4, seed=11))
        b = ddim_masked_sample(noisy_model, board, mask, story,
                               SamplerConfig(steps=4, seed=12))
        for i, bit in enumerate(mask.bits):
            rs, cs = tiny_layout.frame_region(i)
            if bit:
                assert not torch.equal(a.data[:, rs, cs], b.data[:, rs, cs])
            else:
                assert torch.equal(a.data[:, rs, cs], board.data[:, rs, cs])
                assert torch.equal(b.data[:, rs, cs], board.data[:, rs, cs])

    @settings(max_examples=15, deadline=None,
              suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(bits=st.lists(st.booleans(), min_size=4, max_size=4),
           seed=st.integers(0, 2 ** 16))
    def test_preservation_is_bit_exact(self, noisy_model, tiny_layout, bits,
                                       seed):
        board = make_board(tiny_layout, seed=6)
        mask = FrameMask(tuple(bits))
        out = ddim_masked_sample(noisy_model, board, mask,
                                 make_story(tiny_layout, seed=2),
                                 SamplerConfig(steps=3, seed=seed))
        keep = 1.0 - pixel_mask(mask, tiny_layout)
        assert torch.equal(out.data * keep, board.data * keep)

    def test_single_step_closed_form(self, tiny_model, tiny_layout,
                                     monkeypatch):
        eps0 = rand(tiny_layout.canvas_shape, 30).unsqueeze(0) * 0.3
        monkeypatch.setattr(tiny_model, "predict_noise_batch",
                            lambda x_t, t, words, context: eps0)
        seed = 17
        cfg = SamplerConfig(steps=1, seed=seed)
        board = make_board(tiny_layout, seed=7)
        out = ddim_masked_sample(tiny_model, board, FrameMask.full(4),
                                 make_story(tiny_layout), cfg)
        big_t = tiny_model.schedule.num_steps
        ab = tiny_model.schedule.alpha_bar(big_t)
        noise = torch.randn((1, *tiny_layout.canvas_shape),
                            generator=torch.Generator().manual_seed(seed))
        want = (noise - (1.0 - ab) ** 0.5 * eps0) / ab ** 0.5
        assert torch.equal(out.data, want.squeeze(0))

    def test_model_call_count_tracks_guidance(self, tiny_model, tiny_layout,
                                              monkeypatch):
        calls = []
        zero = torch.zeros((1, *tiny_layout.canvas_shape))
        monkeypatch.setattr(
            tiny_model, "predict_noise_batch",
            lambda x_t, t, words, context: calls.append(int(t[0])) or zero)
        board = make_board(tiny_layout, seed=8)
        story = make_story(tiny_layout)
        for w, per_step in ((6.0, 2), (1.0, 1), (0.0, 1)):
            calls.clear()
            ddim_masked_sample(tiny_model, board, FrameMask.full(4), story,
                               SamplerConfig(steps=5, guidance_scale=w))
            assert len(calls) == 5 * per_step

    def test_non_finite_prediction_reports_step(self, tiny_model, tiny_layout,
                                                monkeypatch):
        bad = torch.full((1, *tiny_layout.canvas_shape), float("nan"))
        monkeypatch.setattr(tiny_model, "predict_noise_batch",
                            lambda x_t, t, words, context: bad)
        board = make_board(tiny_layout, seed=9)
        with pytest.raises(NumericError, match="step 0"):
            ddim_masked_sample(tiny_model, board, FrameMask.full(4),
                               make_story(tiny_layout), SamplerConfig(steps=3))

    def test_runaway_values_warn_once(self, tiny_model, tiny_layout,
                                      monkeypatch):
        huge = torch.full((1, *tiny_layout.canvas_shape), 100.0)
        monkeypatch.setattr(tiny_model, "predict_noise_batch",
                            lambda x_t, t, words, context: huge)
        board = make_board(tiny_layout, seed=10)
        with pytest.warns(UserWarning, match="exceeded") as record:
            ddim_masked_sample(tiny_model, board, FrameMask.full(4),
                               make_story(tiny_layout), SamplerConfig(steps=5))
        assert len([r for r in record
                    if "exceeded" in str(r.message)]) == 1

    def test_renoise_flag_changes_trajectory_not_given_frames(
            self, noisy_model, tiny_layout):
        board = make_board(tiny_layout, seed=11)
        story = make_story(tiny_layout, seed=3)
        mask = FrameMask.from_string("1010")
        keep = 1.0 - pixel_mask(mask, tiny_layout)
        clean = ddim_masked_sample(noisy_model, board, mask, story,
                                   SamplerConfig(steps=4, seed=13))
        renoise = ddim_masked_sample(
            noisy_model, board, mask, story,
            SamplerConfig(steps=4, seed=13, renoise_given=True))
        assert torch.equal(clean.data * keep, board.data * keep)
        assert torch.equal(renoise.data * keep, board.data * keep)
        assert not torch.allclose(clean.data, renoise.data, atol=1e-6)

    def test_stochastic_eta_draws_noise_and_preserves(self, noisy_model,
                                                      tiny_layout):
        board = make_board(tiny_layout, seed=12)
        story = make_story(tiny_layout, seed=4)
        mask = FrameMask.from_string("0111")
        keep = 1.0 - pixel_mask(mask, tiny_layout)
        a = ddim_masked_sample(noisy_model, board, mask, story,
                               SamplerConfig(steps=4, seed=14, eta=1.0))
        b = ddim_masked_sample(noisy_model, board, mask, story,
                               SamplerConfig(steps=4, seed=14, eta=0.0))
        assert torch.equal(a.data * keep, board.data * keep)
        assert not torch.allclose(a.data, b.data, atol=1e-6)


class TestBatchedSample:
    def test_size_mismatch_rejected(self, tiny_model, tiny_layout):
        x0 = torch.stack([make_board(tiny_layout, seed=i).data
                          for i in range(2)])
        with pytest.raises(ConfigurationError, match="batch size"):
            ddim_masked_sample_batch(
                tiny_model, x0, [FrameMask.full(4)],
                [make_story(tiny_layout)] * 2, SamplerConfig(steps=2))

    def test_batch_rows_match_single_runs(self, noisy_model, tiny_layout):
        base_seed = 40
        boards = [make_board(tiny_layout, seed=50 + i) for i in range(3)]
        masks = [FrameMask.from_string(s) for s in ("1111", "0110", "1001")]
        stories = [make_story(tiny_layout, seed=60 + i) for i in range(3)]
        cfg = SamplerConfig(steps=3, seed=base_seed)
        batch = ddim_masked_sample_batch(
            noisy_model, torch.stack([b.data for b in boards]), masks,
            stories, cfg)
        for i in range(3):
            single = ddim_masked_sample(
                noisy_model, boards[i], masks[i], stories[i],
                SamplerConfig(steps=3, seed=base_seed + i))
            assert torch.allclose(batch[i], single.data, atol=1e-5), i

    def test_all_false_row_passes_through(self, noisy_model, tiny_layout):
        boards = [make_board(tiny_layout, seed=70 + i) for i in range(2)]
        masks = [FrameMask.from_string("0000"), FrameMask.full(4)]
        stories = [make_story(tiny_layout, seed=80 + i) for i in range(2)]
        out = ddim_masked_sample_batch(
            noisy_model, torch.stack([b.data for b in boards]), masks,
            stories, SamplerConfig(steps=3, seed=90))
        assert torch.equal(out[0], boards[0].data)

    def test_explicit_initial_reproduces_auto_init(self, noisy_model,
                                                   tiny_layout):
        boards = [make_board(tiny_layout, seed=100 + i) for i in range(2)]
        masks = [FrameMask.full(4), FrameMask.from_string("0101")]
        stories = [make_story(tiny_layout, seed=110 + i) for i in range(2)]
        cfg = SamplerConfig(steps=3, seed=120)
        x0 = torch.stack([b.data for b in boards])
        auto = ddim_masked_sample_batch(noisy_model, x0, masks, stories, cfg)
        parts = []
        for i in range(2):
            gen = torch.Generator().manual_seed(cfg.seed + i)
            pm = pixel_mask(masks[i], tiny_layout)
            parts.append(init_masked(boards[i], pm, gen, permissive=True).data)
        manual = ddim_masked_sample_batch(noisy_model, x0, masks, stories,
                                          cfg, initial=torch.stack(parts))
        assert torch.equal(auto, manual)
