"""Frame-story cross-attention with dual low-rank adapters.

One base set of cross-attention projections serves two branches:
  * frame branch — each frame's spatial tokens attend to that frame's own
    caption words, computed for all frames at once by folding the frame grid
    into the batch axis;
  * story branch — every spatial token of the whole storyboard attends to the
    story-level context sequence.
Each branch perturbs the shared base projections with its own low-rank
adapters. Adapter up-projections start at zero, so an untrained layer is
exactly the base attention.
"""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigurationError, LayoutError
from .layout import StoryboardLayout, batch_to_frames, frames_to_batch


def pick_norm_groups(channels: int, preferred: int = 8) -> int:
    """Largest divisor of `channels` not exceeding `preferred`."""
    for g in range(min(preferred, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


class LowRankAdapter(nn.Module):
    """Trainable low-rank delta for a linear projection: (alpha/rank) * up @ down.

    `down` is randomly initialized, `up` starts at zero, so a fresh adapter
    contributes nothing.
    """

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float) -> None:
        super().__init__()
        if not 1 <= rank <= min(d_in, d_out):
            raise ConfigurationError(
                f"rank must lie in [1, {min(d_in, d_out)}], got {rank}"
            )
        self.rank = rank
        self.alpha = alpha
        self.down = nn.Parameter(torch.randn(rank, d_in) / math.sqrt(d_in))
        self.up = nn.Parameter(torch.zeros(d_out, rank))

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> torch.Tensor:
        """The dense (d_out, d_in) weight delta this adapter represents."""
        return self.scaling * (self.up @ self.down)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.scaling * F.linear(F.linear(x, self.down), self.up)


def adapted_project(base: nn.Linear, adapter: LowRankAdapter | None,
                    x: torch.Tensor) -> torch.Tensor:
    """Base projection plus the adapter's low-rank delta (if any)."""
    out = base(x)
    if adapter is not None:
        if adapter.down.shape[1] != base.in_features or \
                adapter.up.shape[0] != base.out_features:
            raise ConfigurationError(
                f"adapter ({adapter.up.shape[0]}x{adapter.down.shape[1]}) does not "
                f"match projection ({base.out_features}x{base.in_features})"
            )
        out = out + adapter(x)
    return out


class AdapterSet(nn.Module):
    """One low-rank adapter per cross-attention projection (q, k, v, out)."""

    def __init__(self, channels: int, text_width: int, rank: int, alpha: float) -> None:
        super().__init__()
        self.q = LowRankAdapter(channels, channels, rank, alpha)
        self.k = LowRankAdapter(text_width, channels, rank, alpha)
        self.v = LowRankAdapter(text_width, channels, rank, alpha)
        self.out = LowRankAdapter(channels, channels, rank, alpha)


class CrossAttentionBase(nn.Module):
    """Multi-head cross-attention projections shared by both branches."""

    def __init__(self, channels: int, text_width: int, heads: int) -> None:
        super().__init__()
        if channels % heads:
            raise ConfigurationError(
                f"channels {channels} not divisible by {heads} heads"
            )
        self.channels = channels
        self.text_width = text_width
        self.heads = heads
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(text_width, channels, bias=False)
        self.to_v = nn.Linear(text_width, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def attend(self, x: torch.Tensor, context: torch.Tensor,
               adapters: AdapterSet | None) -> torch.Tensor:
        """x: (B, N, C) queries; context: (B, M, d_text) keys/values."""
        if context.shape[-1] != self.text_width:
            raise ConfigurationError(
                f"context width {context.shape[-1]} != expected {self.text_width}"
            )
        b, n, c = x.shape
        head_dim = c // self.heads
        q = adapted_project(self.to_q, adapters.q if adapters else None, x)
        k = adapted_project(self.to_k, adapters.k if adapters else None, context)
        v = adapted_project(self.to_v, adapters.v if adapters else None, context)

        def shape(t: torch.Tensor) -> torch.Tensor:
            return t.reshape(b, -1, self.heads, head_dim).transpose(1, 2)

        out = F.scaled_dot_product_attention(shape(q), shape(k), shape(v))
        out = out.transpose(1, 2).reshape(b, n, c)
        return adapted_project(self.to_out, adapters.out if adapters else None, out)


def _tokens(x: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, H*W, C)."""
    b, c, h, w = x.shape
    return x.reshape(b, c, h * w).transpose(1, 2)


def _grid(tokens: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """(B, H*W, C) -> (B, C, H, W)."""
    b, n, c = tokens.shape
    return tokens.transpose(1, 2).reshape(b, c, h, w)


class FrameStoryAttention(nn.Module):
    """Dual-branch cross-attention over a storyboard feature map.

    forward(x, words, global_context) applies, residually:
      1. frame branch: per-frame tokens x their own caption words,
      2. story branch: all storyboard tokens x the global context sequence,
    each preceded by its own group normalization. `parallel=True` switches to
    summing both branch outputs from the same input (ablation);
    `story_enabled=False` drops the story branch (ablation).
    """

    def __init__(
        self,
        channels: int,
        text_width: int,
        layout: StoryboardLayout,
        heads: int = 4,
        rank: int = 4,
        alpha: float = 4.0,
        parallel: bool = False,
        story_enabled: bool = True,
    ) -> None:
        super().__init__()
        self.layout = layout
        self.parallel = parallel
        self.story_enabled = story_enabled
        self.base = CrossAttentionBase(channels, text_width, heads)
        self.frame_adapters = AdapterSet(channels, text_width, rank, alpha)
        self.story_adapters = AdapterSet(channels, text_width, rank, alpha)
        groups = pick_norm_groups(channels)
        self.norm_frame = nn.GroupNorm(groups, channels)
        self.norm_story = nn.GroupNorm(groups, channels)

    def _check_divisible(self, x: torch.Tensor) -> tuple[int, int]:
        b, c, h, w = x.shape
        rows, cols = self.layout.grid_rows, self.layout.grid_cols
        if h % rows or w % cols:
            raise LayoutError(
                f"feature map {h}x{w} not divisible into the {rows}x{cols} frame grid"
            )
        return h // rows, w // cols

    def frame_cross_attend(self, x: torch.Tensor, words: torch.Tensor) -> torch.Tensor:
        """Each frame's tokens attend to that frame's words.

        x: (B, C, H, W) storyboard features; words: (B, F, L, d_text).
        Implemented as one batched attention by folding frames into the batch.
        """
        b, c, h, w = x.shape
        f = self.layout.num_frames
        if words.shape[:2] != (b, f):
            raise ConfigurationError(
                f"words must be (B={b}, F={f}, L, d), got {tuple(words.shape)}"
            )
        fh, fw = self._check_divisible(x)
        tiles = frames_to_batch(x, self.layout.grid_rows, self.layout.grid_cols)
        ctx = words.reshape(b * f, words.shape[2], words.shape[3])
        out = self.base.attend(_tokens(tiles), ctx, self.frame_adapters)
        out = _grid(out, fh, fw)
        return batch_to_frames(out, self.layout.grid_rows, self.layout.grid_cols, b)

    def story_cross_attend(self, x: torch.Tensor,
                           global_context: torch.Tensor) -> torch.Tensor:
        """All storyboard tokens attend to the story-level context sequence.

        x: (B, C, H, W); global_context: (B, G, d_text).
        """
        b, c, h, w = x.shape
        if global_context.dim() != 3 or global_context.shape[0] != b:
            raise ConfigurationError(
                f"global context must be (B={b}, G, d), got "
                f"{tuple(global_context.shape)}"
            )
        out = self.base.attend(_tokens(x), global_context, self.story_adapters)
        return _grid(out, h, w)

    def forward(self, x: torch.Tensor, words: torch.Tensor,
                global_context: torch.Tensor) -> torch.Tensor:
        if self.parallel:
            out = x + self.frame_cross_attend(self.norm_frame(x), words)
            if self.story_enabled:
                out = out + self.story_cross_attend(self.norm_story(x), global_context)
            return out
        x = x + self.frame_cross_attend(self.norm_frame(x), words)
        if self.story_enabled:
            x = x + self.story_cross_attend(self.norm_story(x), global_context)
        return x
