"""Masked DDIM sampling with classifier-free guidance.

One code path serves every task: the frame mask says which frames to
synthesize, and the unmasked frames are held at their clean known content
through every step — they are never noised and never touched by the update,
so they survive bit-exactly. Visualization is an all-true mask, continuation
a mask with the leading frame(s) false, completion any other mask.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .captions import Caption
from .errors import ConfigurationError, DegenerateMaskError, NumericError
from .layout import FrameMask, LatentStoryboard, pixel_mask
from .model import StoryModel

VALUE_SENTINEL = 3.0


@dataclass(frozen=True)
class SamplerConfig:
    """Knobs for the reverse loop.

    renoise_given is an experimental alternative hold strategy: instead of
    keeping given frames clean through every step, they are re-noised to the
    current timestep's level before blending. The final step always re-imposes
    the clean content, so byte-exact preservation of given frames still holds.
    """

    steps: int = 50
    guidance_scale: float = 6.0
    eta: float = 0.0
    seed: int = 0
    clamp_predictions: bool = False
    renoise_given: bool = False

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if self.guidance_scale < 0:
            raise ConfigurationError(
                f"guidance scale must be >= 0, got {self.guidance_scale}"
            )
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigurationError(f"eta must lie in [0, 1], got {self.eta}")


def select_timesteps(num_train_steps: int, steps: int) -> list[int]:
    """Strictly decreasing uniform subsequence of [1, T], starting at T."""
    if not 1 <= steps <= num_train_steps:
        raise ConfigurationError(
            f"steps must lie in [1, {num_train_steps}], got {steps}"
        )
    if steps == 1:
        return [num_train_steps]
    grid = np.linspace(num_train_steps, 1, steps)
    chosen = [int(round(v)) for v in grid]
    return chosen


def init_masked(x0_known: LatentStoryboard, mask: torch.Tensor,
                generator: torch.Generator | None = None,
                permissive: bool = False) -> LatentStoryboard:
    """Starting canvas: unit noise inside the mask, known content outside."""
    if not (mask > 0).any():
        if permissive:
            return LatentStoryboard(x0_known.data.clone(), x0_known.layout)
        raise DegenerateMaskError("mask selects no frames to generate")
    noise = torch.randn(x0_known.data.shape, generator=generator,
                        dtype=x0_known.data.dtype)
    mask = mask.to(x0_known.data.dtype)
    return LatentStoryboard(
        noise * mask + x0_known.data * (1.0 - mask), x0_known.layout
    )


def cfg_predict(model: StoryModel, x_t: torch.Tensor, t: torch.Tensor,
                words_cond: torch.Tensor, words_null: torch.Tensor,
                context_cond, context_null, w: float) -> torch.Tensor:
    """Guided noise estimate: null + w * (cond - null), with exact shortcuts
    at w=1 (conditional only) and w=0 (unconditional only)."""
    if w == 1.0:
        return model.predict_noise_batch(x_t, t, words_cond, context_cond)
    if w == 0.0:
        return model.predict_noise_batch(x_t, t, words_null, context_null)
    eps_cond = model.predict_noise_batch(x_t, t, words_cond, context_cond)
    eps_null = model.predict_noise_batch(x_t, t, words_null, context_null)
    return eps_null + w * (eps_cond - eps_null)


def _ddim_loop(model: StoryModel, x: torch.Tensor, known: torch.Tensor,
               mask: torch.Tensor, words_cond: torch.Tensor,
               words_null: torch.Tensor, context_cond, context_null,
               config: SamplerConfig,
               generator: torch.Generator | None) -> torch.Tensor:
    """Core reverse loop over a (B, C, H, W) batch; mask broadcasts to it."""
    schedule = model.schedule
    timesteps = select_timesteps(schedule.num_steps, config.steps)
    mask = mask.to(x.dtype)
    keep = 1.0 - mask
    batch = x.shape[0]
    warned = False

    for i, t in enumerate(timesteps):
        t_next = timesteps[i + 1] if i + 1 < len(timesteps) else 0
        ab_t = schedule.alpha_bar(t)
        ab_next = schedule.alpha_bar(t_next)
        t_batch = torch.full((batch,), t, dtype=torch.long)

        eps_hat = cfg_predict(model, x, t_batch, words_cond, words_null,
                              context_cond, context_null, config.guidance_scale)

        x0_hat = (x - (1.0 - ab_t) ** 0.5 * eps_hat) / ab_t ** 0.5
        if config.clamp_predictions:
            x0_hat = x0_hat.clamp(-VALUE_SENTINEL, VALUE_SENTINEL)

        if config.eta > 0.0 and t_next > 0:
            sigma = (
                config.eta
                * ((1.0 - ab_next) / (1.0 - ab_t)) ** 0.5
                * (1.0 - ab_t / ab_next) ** 0.5
            )
            direction = max(1.0 - ab_next - sigma ** 2, 0.0) ** 0.5 * eps_hat
            z = torch.randn(x.shape, generator=generator, dtype=x.dtype)
            x = ab_next ** 0.5 * x0_hat + direction + sigma * z
        else:
            x = ab_next ** 0.5 * x0_hat + (1.0 - ab_next) ** 0.5 * eps_hat

        if config.renoise_given and t_next > 0:
            z_keep = torch.randn(x.shape, generator=generator, dtype=x.dtype)
            known_level = ab_next ** 0.5 * known + (1.0 - ab_next) ** 0.5 * z_keep
            x = x * mask + known_level * keep
        else:
            x = x * mask + known * keep

        if not torch.isfinite(x).all():
            raise NumericError(
                f"non-finite values at sampler step {i} (t={t})"
            )
        if not warned and x.abs().max().item() > VALUE_SENTINEL:
            warnings.warn(
                f"sampler values exceeded ±{VALUE_SENTINEL} at step {i} (t={t})",
                stacklevel=2,
            )
            warned = True
    return x


def ddim_masked_sample(model: StoryModel, x0_known: LatentStoryboard,
                       mask: FrameMask, captions: list[Caption],
                       config: SamplerConfig) -> LatentStoryboard:
    """Generate the masked frames of one storyboard, holding the rest.

    x0_known carries the known frames' content (masked frames' content is
    ignored); captions cover all frames, known ones included.
    """
    layout = x0_known.layout
    if len(mask) != layout.num_frames:
        raise ConfigurationError(
            f"mask covers {len(mask)} frames, layout has {layout.num_frames}"
        )
    if len(captions) != layout.num_frames:
        raise ConfigurationError(
            f"need {layout.num_frames} captions, got {len(captions)}"
        )
    if not mask.any_target:
        return LatentStoryboard(x0_known.data.clone(), layout)

    generator = torch.Generator().manual_seed(config.seed)
    pm = pixel_mask(mask, layout, dtype=x0_known.data.dtype)
    start = init_masked(x0_known, pm, generator)

    with torch.no_grad():
        words_cond = model.encode_captions([captions])
        context_cond = model.conditioning(words_cond)
        words_null, context_null = model.null_conditioning(1)
        out = _ddim_loop(
            model, start.data.unsqueeze(0), x0_known.data.unsqueeze(0),
            pm.unsqueeze(0), words_cond, words_null, context_cond,
            context_null, config, generator,
        )
    return LatentStoryboard(out.squeeze(0), layout)


def ddim_masked_sample_batch(
    model: StoryModel,
    x0_known: torch.Tensor,
    masks: list[FrameMask],
    stories: list[list[Caption]],
    config: SamplerConfig,
    initial: torch.Tensor | None = None,
) -> torch.Tensor:
    """Batched sampling of B storyboards with per-sample masks and captions.

    x0_known: (B, C, H, W) known content in diffusion space. When `initial`
    is given it is used as the starting canvas (callers control per-sample
    noise); otherwise each sample i is initialized from seed config.seed + i,
    so results are independent of batch composition order.
    """
    layout = model.layout
    batch = x0_known.shape[0]
    if not (len(masks) == len(stories) == batch):
        raise ConfigurationError(
            f"batch size mismatch: {batch} canvases, {len(masks)} masks, "
            f"{len(stories)} caption sets"
        )
    pms = torch.stack([pixel_mask(m, layout, dtype=x0_known.dtype) for m in masks])
    if initial is None:
        parts = []
        for i in range(batch):
            gen = torch.Generator().manual_seed(config.seed + i)
            sb = LatentStoryboard(x0_known[i], layout)
            parts.append(init_masked(sb, pms[i], gen, permissive=True).data)
        initial = torch.stack(parts)

    with torch.no_grad():
        words_cond = model.encode_captions(stories)
        context_cond = model.conditioning(words_cond)
        words_null, context_null = model.null_conditioning(batch)
        generator = torch.Generator().manual_seed(config.seed)
        return _ddim_loop(
            model, initial, x0_known, pms, words_cond, words_null,
            context_cond, context_null, config, generator,
        )
