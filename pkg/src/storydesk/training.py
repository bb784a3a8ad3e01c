"""Training loop: masked-noise prediction with task-mask sampling,
story-level caption dropout, and two learning-rate groups (denoiser vs.
text/context path)."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .captions import Caption, tokenize, tokenize_story
from .errors import ConfigurationError, NumericError
from .layout import FrameMask, pixel_mask
from .model import StoryModel
from .schedule import masked_forward_batch, masked_loss_batch
from .stories import Story, render_story_canvas


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    lr_denoiser: float = 3e-4
    lr_context: float = 1e-4
    steps: int = 4000
    p_full: float = 0.5
    caption_dropout: float = 0.1
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    freeze_cam_base: bool = False
    log_every: int = 100

    def __post_init__(self) -> None:
        for name in ("p_full", "caption_dropout"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {v}")
        for name in ("batch_size", "steps"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        for name in ("lr_denoiser", "lr_context"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")

    def to_json(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "lr_denoiser": self.lr_denoiser,
            "lr_context": self.lr_context,
            "steps": self.steps,
            "p_full": self.p_full,
            "caption_dropout": self.caption_dropout,
            "weight_decay": self.weight_decay,
            "betas": list(self.betas),
            "seed": self.seed,
            "freeze_cam_base": self.freeze_cam_base,
            "log_every": self.log_every,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        obj["betas"] = tuple(obj.get("betas", (0.9, 0.999)))
        return cls(**obj)


def sample_task_mask(rng: np.random.Generator, num_frames: int,
                     p_full: float) -> FrameMask:
    """All-true with probability p_full; otherwise a uniform draw over the
    nonempty strict subsets (at least one frame generated, at least one given)."""
    if num_frames < 1:
        raise ConfigurationError("num_frames must be >= 1")
    if rng.random() < p_full:
        return FrameMask.full(num_frames)
    if num_frames < 2:
        raise ConfigurationError(
            "partial masks need at least 2 frames (nothing can be both "
            "given and generated)"
        )
    value = int(rng.integers(1, 2 ** num_frames - 1))
    return FrameMask(tuple(bool((value >> i) & 1) for i in range(num_frames)))


class Trainer:
    """Owns the optimizer and RNG streams; everything is seeded, so runs with
    caption_dropout handled by the policy RNG are reproducible bit-for-bit."""

    def __init__(self, model: StoryModel, stories: list[Story],
                 config: TrainConfig) -> None:
        if not stories:
            raise ConfigurationError("no training stories supplied")
        self.model = model
        self.config = config
        self.layout = model.layout
        self.policy_rng = np.random.default_rng(config.seed)
        self.noise_generator = torch.Generator().manual_seed(config.seed)
        self.step_count = 0

        canvases = np.stack(
            [render_story_canvas(s, self.layout) for s in stories]
        )  # (N, H, W, 3) in [0, 1]
        data = torch.from_numpy(canvases).permute(0, 3, 1, 2).contiguous()
        self.latents = model.codec.encode(data)
        self.tokens = torch.stack([tokenize_story(s.captions()) for s in stories])
        self.null_tokens = torch.tensor(
            [tokenize(Caption.null())] * self.layout.num_frames, dtype=torch.long
        )

        denoiser_params = []
        for name, p in model.denoiser.named_parameters():
            if config.freeze_cam_base and ".base." in f".{name}":
                p.requires_grad_(False)
                continue
            denoiser_params.append(p)
        context_params = list(model.context_extractor.parameters()) + list(
            model.text_encoder.parameters()
        )
        self.optimizer = torch.optim.AdamW(
            [
                {"params": denoiser_params, "lr": config.lr_denoiser},
                {"params": context_params, "lr": config.lr_context},
            ],
            betas=config.betas,
            weight_decay=config.weight_decay,
        )

    def _draw_batch(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor,
                                   torch.Tensor, list[FrameMask]]:
        cfg = self.config
        n = self.latents.shape[0]
        idx = self.policy_rng.integers(0, n, size=cfg.batch_size)
        x0 = self.latents[torch.from_numpy(idx)]
        t = torch.from_numpy(
            self.policy_rng.integers(
                1, self.model.schedule.num_steps + 1, size=cfg.batch_size
            )
        ).long()
        tokens = self.tokens[torch.from_numpy(idx)].clone()
        for b in range(cfg.batch_size):
            if self.policy_rng.random() < cfg.caption_dropout:
                tokens[b] = self.null_tokens
        masks = [
            sample_task_mask(self.policy_rng, self.layout.num_frames, cfg.p_full)
            for _ in range(cfg.batch_size)
        ]
        return x0, t, tokens, idx, masks

    def train_step(self) -> float:
        x0, t, tokens, _, masks = self._draw_batch()
        pm = torch.stack(
            [pixel_mask(m, self.layout, dtype=x0.dtype) for m in masks]
        )
        eps = torch.randn(x0.shape, generator=self.noise_generator,
                          dtype=x0.dtype)
        x_t = masked_forward_batch(x0, eps, pm, t, self.model.schedule)

        words = self.model.text_encoder(tokens)
        context = self.model.context_extractor(words)
        eps_pred = self.model.denoiser(x_t, t, words, context)
        loss = masked_loss_batch(eps, eps_pred, pm)

        if not torch.isfinite(loss):
            raise NumericError(
                f"non-finite loss at step {self.step_count}: "
                f"t={t.tolist()}, mask popcounts="
                f"{[m.num_targets for m in masks]}"
            )
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.step_count += 1
        return float(loss.item())

    def train(self, steps: int | None = None,
              on_log: Callable[[int, float, float], None] | None = None) -> list[float]:
        """Run `steps` updates (default config.steps); returns the loss curve."""
        steps = self.config.steps if steps is None else steps
        self.model.train()
        losses = []
        window: list[float] = []
        started = time.monotonic()
        for _ in range(steps):
            loss = self.train_step()
            losses.append(loss)
            window.append(loss)
            if on_log and self.step_count % self.config.log_every == 0:
                on_log(self.step_count, float(np.mean(window)),
                       time.monotonic() - started)
                window.clear()
        self.model.eval()
        return losses
