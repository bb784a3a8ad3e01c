"""Storyboard denoiser: a small U-shaped network predicting noise.

Self-attention spans the whole storyboard (the cross-frame information path);
cross-attention is the dual frame/story module. The frame-aware latent prior
is added once, to the network input. Output heads and residual second convs
start at zero, so a fresh network is a near-identity map of its skip paths —
standard practice that keeps early training stable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn import functional as F

from .attention import FrameStoryAttention, pick_norm_groups
from .blocks import sinusoidal_embedding, zero_module
from .context import ContextFeatures
from .errors import ConfigurationError, NumericError, RangeError
from .layout import StoryboardLayout


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture knobs. attention_sizes are canvas heights (per level)
    at which self-attention and frame/story cross-attention are inserted."""

    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 2, 4)
    attention_sizes: tuple[int, ...] = (16, 8)
    num_res_blocks: int = 1
    head_count: int = 4
    text_width: int = 64
    lora_rank: int = 4
    lora_alpha: float = 4.0
    self_attention_enabled: bool = True
    story_branch_enabled: bool = True
    parallel_cam: bool = False

    def to_json(self) -> dict:
        return {
            "base_channels": self.base_channels,
            "channel_multipliers": list(self.channel_multipliers),
            "attention_sizes": list(self.attention_sizes),
            "num_res_blocks": self.num_res_blocks,
            "head_count": self.head_count,
            "text_width": self.text_width,
            "lora_rank": self.lora_rank,
            "lora_alpha": self.lora_alpha,
            "self_attention_enabled": self.self_attention_enabled,
            "story_branch_enabled": self.story_branch_enabled,
            "parallel_cam": self.parallel_cam,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DenoiserConfig":
        return cls(
            base_channels=int(obj["base_channels"]),
            channel_multipliers=tuple(obj["channel_multipliers"]),
            attention_sizes=tuple(obj["attention_sizes"]),
            num_res_blocks=int(obj["num_res_blocks"]),
            head_count=int(obj["head_count"]),
            text_width=int(obj["text_width"]),
            lora_rank=int(obj["lora_rank"]),
            lora_alpha=float(obj["lora_alpha"]),
            self_attention_enabled=bool(obj["self_attention_enabled"]),
            story_branch_enabled=bool(obj["story_branch_enabled"]),
            parallel_cam=bool(obj["parallel_cam"]),
        )


class ResBlock(nn.Module):
    """Two-conv residual block with additive timestep conditioning."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int) -> None:
        super().__init__()
        self.norm1 = nn.GroupNorm(pick_norm_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(pick_norm_groups(out_ch), out_ch)
        self.conv2 = zero_module(nn.Conv2d(out_ch, out_ch, 3, padding=1))
        self.skip = (
            nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        )

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(t_emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SpatialSelfAttention(nn.Module):
    """Self-attention over every spatial token of the storyboard feature map."""

    def __init__(self, channels: int, heads: int) -> None:
        super().__init__()
        if channels % heads:
            raise ConfigurationError(
                f"channels {channels} not divisible by {heads} heads"
            )
        self.heads = heads
        self.norm = nn.GroupNorm(pick_norm_groups(channels), channels)
        self.to_qkv = nn.Conv2d(channels, channels * 3, 1)
        self.to_out = zero_module(nn.Conv2d(channels, channels, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        qkv = self.to_qkv(self.norm(x))
        q, k, v = qkv.chunk(3, dim=1)
        head_dim = c // self.heads

        def shape(t: torch.Tensor) -> torch.Tensor:
            return t.reshape(b, self.heads, head_dim, h * w).transpose(2, 3)

        out = F.scaled_dot_product_attention(shape(q), shape(k), shape(v))
        out = out.transpose(2, 3).reshape(b, c, h, w)
        return x + self.to_out(out)


class _AttentionPair(nn.Module):
    """Storyboard self-attention followed by frame/story cross-attention."""

    def __init__(self, channels: int, config: DenoiserConfig,
                 layout: StoryboardLayout) -> None:
        super().__init__()
        self.self_attn = SpatialSelfAttention(channels, config.head_count)
        self.cam = FrameStoryAttention(
            channels,
            config.text_width,
            layout,
            heads=config.head_count,
            rank=config.lora_rank,
            alpha=config.lora_alpha,
            parallel=config.parallel_cam,
            story_enabled=config.story_branch_enabled,
        )
        self.self_attention_enabled = config.self_attention_enabled

    def forward(self, x: torch.Tensor, words: torch.Tensor,
                global_context: torch.Tensor) -> torch.Tensor:
        if self.self_attention_enabled:
            x = self.self_attn(x)
        return self.cam(x, words, global_context)


class Downsample(nn.Module):
    def __init__(self, channels: int) -> None:
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int) -> None:
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Denoiser(nn.Module):
    """U-shaped noise predictor over storyboard canvases."""

    def __init__(self, config: DenoiserConfig, layout: StoryboardLayout) -> None:
        super().__init__()
        self.config = config
        self.layout = layout
        self._validate(config, layout)

        base = config.base_channels
        time_dim = base * 4
        self.time_mlp = nn.Sequential(
            nn.Linear(base, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        self.conv_in = nn.Conv2d(layout.channels, base, 3, padding=1)

        level_channels = [base * m for m in config.channel_multipliers]
        level_heights = [
            layout.canvas_height // (2 ** i)
            for i in range(len(config.channel_multipliers))
        ]

        def make_pair(ch: int) -> _AttentionPair:
            return _AttentionPair(ch, config, layout)

        self.down_blocks = nn.ModuleList()
        skip_channels = [base]
        ch = base
        for i, out_ch in enumerate(level_channels):
            for _ in range(config.num_res_blocks):
                block = nn.ModuleDict({"res": ResBlock(ch, out_ch, time_dim)})
                if level_heights[i] in config.attention_sizes:
                    block["attn"] = make_pair(out_ch)
                self.down_blocks.append(block)
                ch = out_ch
                skip_channels.append(ch)
            if i < len(level_channels) - 1:
                self.down_blocks.append(nn.ModuleDict({"down": Downsample(ch)}))
                skip_channels.append(ch)

        self.mid_res1 = ResBlock(ch, ch, time_dim)
        self.mid_attn = make_pair(ch)
        self.mid_res2 = ResBlock(ch, ch, time_dim)

        self.up_blocks = nn.ModuleList()
        for i in reversed(range(len(level_channels))):
            out_ch = level_channels[i]
            for _ in range(config.num_res_blocks + 1):
                block = nn.ModuleDict(
                    {"res": ResBlock(ch + skip_channels.pop(), out_ch, time_dim)}
                )
                if level_heights[i] in config.attention_sizes:
                    block["attn"] = make_pair(out_ch)
                self.up_blocks.append(block)
                ch = out_ch
            if i > 0:
                self.up_blocks.append(nn.ModuleDict({"up": Upsample(ch)}))

        self.out_norm = nn.GroupNorm(pick_norm_groups(ch), ch)
        self.out_conv = zero_module(nn.Conv2d(ch, layout.channels, 3, padding=1))

    @staticmethod
    def _validate(config: DenoiserConfig, layout: StoryboardLayout) -> None:
        depth = len(config.channel_multipliers)
        if depth < 1:
            raise ConfigurationError("need at least one channel multiplier")
        for i in range(depth):
            h = layout.canvas_height // (2 ** i)
            w = layout.canvas_width // (2 ** i)
            if h * (2 ** i) != layout.canvas_height or \
                    w * (2 ** i) != layout.canvas_width:
                raise ConfigurationError(
                    f"canvas {layout.canvas_height}x{layout.canvas_width} not "
                    f"divisible through {depth} levels"
                )
            if h in config.attention_sizes and (
                h % layout.grid_rows or w % layout.grid_cols
            ):
                raise ConfigurationError(
                    f"attention at canvas height {h} cannot tile the "
                    f"{layout.grid_rows}x{layout.grid_cols} frame grid"
                )
        deepest_h = layout.canvas_height // (2 ** (depth - 1))
        deepest_w = layout.canvas_width // (2 ** (depth - 1))
        if deepest_h % layout.grid_rows or deepest_w % layout.grid_cols:
            raise ConfigurationError(
                f"deepest level {deepest_h}x{deepest_w} cannot tile the frame grid"
            )

    def set_self_attention(self, enabled: bool) -> None:
        """Runtime ablation toggle for the cross-frame self-attention path."""
        for module in self.modules():
            if isinstance(module, _AttentionPair):
                module.self_attention_enabled = enabled

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, words: torch.Tensor,
                context: ContextFeatures) -> torch.Tensor:
        """Predict the noise content of x_t.

        x_t: (B, C, H, W); t: (B,) timesteps >= 1; words: (B, F, L, d_text);
        context: matching batched conditioning bundle.
        """
        if tuple(x_t.shape[1:]) != self.layout.canvas_shape:
            raise ConfigurationError(
                f"input shape {tuple(x_t.shape[1:])} != layout canvas "
                f"{self.layout.canvas_shape}"
            )
        if not torch.isfinite(x_t).all():
            raise NumericError("denoiser input contains non-finite values")
        if (t < 1).any():
            raise RangeError(f"timesteps must be >= 1, got min {t.min().item()}")

        t_emb = self.time_mlp(
            sinusoidal_embedding(t, self.config.base_channels)
            .to(self.conv_in.weight.dtype)
        )
        g = context.global_context

        if context.latent_prior is None:
            h = self.conv_in(x_t)
        else:
            h = self.conv_in(x_t + context.latent_prior)
        skips = [h]
        for block in self.down_blocks:
            if "down" in block:
                h = block["down"](h)
            else:
                h = block["res"](h, t_emb)
                if "attn" in block:
                    h = block["attn"](h, words, g)
            skips.append(h)

        h = self.mid_res1(h, t_emb)
        h = self.mid_attn(h, words, g)
        h = self.mid_res2(h, t_emb)

        for block in self.up_blocks:
            if "up" in block:
                h = block["up"](h)
            else:
                h = block["res"](torch.cat([h, skips.pop()], dim=1), t_emb)
                if "attn" in block:
                    h = block["attn"](h, words, g)

        return self.out_conv(F.silu(self.out_norm(h)))
