"""The full trainable bundle: text encoder, context extractor, denoiser.

Also home to the latent codec — the pluggable map between image space and the
space the diffusion runs in. The default is identity (pixel-space diffusion);
the desk preset uses an affine [0,1] -> [-1,1] map so unit noise matches the
data scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import torch
from torch import nn

from .blocks import deterministic_init
from .captions import Caption, TextEncoder, tokenize_story
from .context import ContextExtractor, ContextFeatures
from .errors import ConfigurationError, RangeError
from .layout import LatentStoryboard, StoryboardLayout
from .schedule import NoiseSchedule, make_linear_schedule
from .unet import Denoiser, DenoiserConfig


class LatentCodec(Protocol):
    """Invertible map between image space and diffusion space."""

    def encode(self, x: torch.Tensor) -> torch.Tensor: ...
    def decode(self, z: torch.Tensor) -> torch.Tensor: ...
    def to_json(self) -> dict: ...


class IdentityCodec:
    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return x

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return z

    def to_json(self) -> dict:
        return {"kind": "identity"}


class AffineCodec:
    def __init__(self, scale: float = 2.0, shift: float = -1.0) -> None:
        if scale == 0:
            raise ConfigurationError("codec scale must be nonzero")
        self.scale = scale
        self.shift = shift

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.scale + self.shift

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return (z - self.shift) / self.scale

    def to_json(self) -> dict:
        return {"kind": "affine", "scale": self.scale, "shift": self.shift}


def codec_from_json(obj: dict) -> LatentCodec:
    kind = obj.get("kind")
    if kind == "identity":
        return IdentityCodec()
    if kind == "affine":
        return AffineCodec(float(obj["scale"]), float(obj["shift"]))
    raise ConfigurationError(f"unknown codec kind {kind!r}")


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to rebuild the model architecture from JSON."""

    layout: StoryboardLayout
    denoiser: DenoiserConfig
    text_heads: int = 4
    context_queries: int = 4
    prior_queries: int = 4
    context_heads: int = 4
    prior_hidden: int = 128
    schedule_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    codec: dict = field(default_factory=lambda: {"kind": "identity"})

    @property
    def text_width(self) -> int:
        return self.denoiser.text_width

    def to_json(self) -> dict:
        return {
            "layout": self.layout.to_json(),
            "denoiser": self.denoiser.to_json(),
            "text_heads": self.text_heads,
            "context_queries": self.context_queries,
            "prior_queries": self.prior_queries,
            "context_heads": self.context_heads,
            "prior_hidden": self.prior_hidden,
            "schedule_steps": self.schedule_steps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "codec": dict(self.codec),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(
            layout=StoryboardLayout.from_json(obj["layout"]),
            denoiser=DenoiserConfig.from_json(obj["denoiser"]),
            text_heads=int(obj["text_heads"]),
            context_queries=int(obj["context_queries"]),
            prior_queries=int(obj["prior_queries"]),
            context_heads=int(obj["context_heads"]),
            prior_hidden=int(obj["prior_hidden"]),
            schedule_steps=int(obj["schedule_steps"]),
            beta_start=float(obj["beta_start"]),
            beta_end=float(obj["beta_end"]),
            codec=dict(obj["codec"]),
        )


class StoryModel(nn.Module):
    """Text encoder + context extractor + denoiser behind one interface."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        self.layout = config.layout
        self.text_encoder = TextEncoder(config.text_width, config.text_heads)
        self.context_extractor = ContextExtractor(
            config.layout,
            width=config.text_width,
            heads=config.context_heads,
            context_queries=config.context_queries,
            prior_queries=config.prior_queries,
            prior_hidden=config.prior_hidden,
        )
        self.denoiser = Denoiser(config.denoiser, config.layout)
        self.schedule: NoiseSchedule = make_linear_schedule(
            config.schedule_steps, config.beta_start, config.beta_end
        )
        self.codec: LatentCodec = codec_from_json(config.codec)

    def encode_captions(self, stories: list[list[Caption]]) -> torch.Tensor:
        """Word embeddings for a batch of story captions: (B, F, L, d)."""
        f = self.layout.num_frames
        for captions in stories:
            if len(captions) != f:
                raise ConfigurationError(
                    f"each story needs {f} captions, got {len(captions)}"
                )
        tokens = torch.stack([tokenize_story(c) for c in stories])
        return self.text_encoder(tokens)

    def conditioning(self, words: torch.Tensor) -> ContextFeatures:
        return self.context_extractor(words)

    def null_conditioning(self, batch: int) -> tuple[torch.Tensor, ContextFeatures]:
        """Word embeddings and context for the all-null story caption."""
        null_story = [Caption.null()] * self.layout.num_frames
        words = self.encode_captions([null_story] * batch)
        return words, self.conditioning(words)

    def predict_noise_batch(self, x_t: torch.Tensor, t: torch.Tensor,
                            words: torch.Tensor,
                            context: ContextFeatures) -> torch.Tensor:
        if (t > self.schedule.num_steps).any():
            raise RangeError(
                f"timestep exceeds schedule length {self.schedule.num_steps}"
            )
        return self.denoiser(x_t, t, words, context)

    def predict_noise(self, x_t: LatentStoryboard, t: int,
                      captions: list[Caption]) -> torch.Tensor:
        """Single-storyboard prediction; returns the (c, H, W) noise estimate."""
        words = self.encode_captions([captions])
        context = self.conditioning(words)
        t_tensor = torch.tensor([t], dtype=torch.long)
        out = self.predict_noise_batch(
            x_t.data.unsqueeze(0), t_tensor, words, context
        )
        return out.squeeze(0)


def build_story_model(config: ModelConfig, seed: int = 0) -> StoryModel:
    """Construct a model with all random initialization drawn from `seed`."""
    with deterministic_init(seed):
        return StoryModel(config)


def desk_model_config() -> ModelConfig:
    """The trained-from-scratch configuration used by the shipped checkpoint:
    4 frames of 32x32 in a 2x2 grid, ~4M parameter denoiser."""
    layout = StoryboardLayout(
        num_frames=4, grid_rows=2, grid_cols=2,
        frame_height=32, frame_width=32, channels=3,
    )
    return ModelConfig(
        layout=layout,
        denoiser=DenoiserConfig(
            base_channels=32,
            channel_multipliers=(1, 2, 2, 4),
            attention_sizes=(16, 8),
            num_res_blocks=1,
            head_count=4,
            text_width=64,
            lora_rank=4,
            lora_alpha=4.0,
        ),
        codec={"kind": "affine", "scale": 2.0, "shift": -1.0},
    )


def tiny_model_config(
    frames: int = 4, grid: tuple[int, int] = (2, 2), frame_size: int = 8,
    schedule_steps: int = 100,
) -> ModelConfig:
    """A minutes-scale configuration for tests and demos."""
    layout = StoryboardLayout(
        num_frames=frames, grid_rows=grid[0], grid_cols=grid[1],
        frame_height=frame_size, frame_width=frame_size, channels=3,
    )
    return ModelConfig(
        layout=layout,
        denoiser=DenoiserConfig(
            base_channels=16,
            channel_multipliers=(1, 2),
            attention_sizes=(layout.canvas_height // 2,),
            num_res_blocks=1,
            head_count=2,
            text_width=32,
            lora_rank=2,
            lora_alpha=2.0,
        ),
        text_heads=2,
        context_queries=2,
        prior_queries=2,
        context_heads=2,
        prior_hidden=32,
        schedule_steps=schedule_steps,
        codec={"kind": "affine", "scale": 2.0, "shift": -1.0},
    )
