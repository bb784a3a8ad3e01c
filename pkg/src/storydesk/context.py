"""Contextual feature extraction from per-frame word embeddings.

Three products, all consumed by the denoiser:
  * frame_context  — K_c summary rows per frame (frame-local conditioning),
  * global_context — one sequence spanning all frames (story-level
    conditioning), built by a summarizer that sees learned frame-index
    position encodings so frame order is retained,
  * latent_prior   — a per-frame additive bias assembled to storyboard shape
    and added once at the denoiser input. Its output head starts at zero, so
    an untrained extractor leaves the latent path untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .blocks import TransformerLayer, zero_module
from .errors import ConfigurationError
from .layout import StoryboardLayout, batch_to_frames


@dataclass
class ContextFeatures:
    """Batched conditioning bundle: (B,F,K_c,d), (B,G,d), (B,c,H,W).

    latent_prior may be None, meaning "no additive input bias" — consumers
    treat it exactly like an all-zero prior."""

    frame_context: torch.Tensor
    global_context: torch.Tensor
    latent_prior: torch.Tensor | None


class ContextExtractor(nn.Module):
    """Query-token transformer over per-frame words, plus summarizer and prior head."""

    def __init__(
        self,
        layout: StoryboardLayout,
        width: int = 64,
        heads: int = 4,
        context_queries: int = 4,
        prior_queries: int = 4,
        prior_hidden: int = 128,
    ) -> None:
        super().__init__()
        self.layout = layout
        self.width = width
        self.num_context_queries = context_queries
        self.num_prior_queries = prior_queries

        self.context_query_bank = nn.Parameter(torch.randn(context_queries, width) * 0.02)
        self.prior_query_bank = nn.Parameter(torch.randn(prior_queries, width) * 0.02)
        self.extractor = nn.ModuleList(
            [TransformerLayer(width, heads) for _ in range(2)]
        )
        self.frame_positions = nn.Parameter(
            torch.randn(layout.num_frames, width) * 0.02
        )
        self.summarizer = nn.ModuleList(
            [TransformerLayer(width, heads) for _ in range(2)]
        )
        frame_elems = layout.channels * layout.frame_height * layout.frame_width
        self.prior_head = nn.Sequential(
            nn.Linear(prior_queries * width, prior_hidden),
            nn.SiLU(),
            zero_module(nn.Linear(prior_hidden, frame_elems)),
        )

    @property
    def global_rows(self) -> int:
        return self.layout.num_frames * self.num_context_queries

    def _check_words(self, words: torch.Tensor) -> torch.Tensor:
        if words.dim() == 3:
            words = words.unsqueeze(0)
        if words.dim() != 4:
            raise ConfigurationError(
                f"word embeddings must be (F, L, d) or (B, F, L, d), "
                f"got {tuple(words.shape)}"
            )
        if words.shape[-1] != self.width:
            raise ConfigurationError(
                f"word embedding width {words.shape[-1]} != extractor width {self.width}"
            )
        if words.shape[1] != self.layout.num_frames:
            raise ConfigurationError(
                f"got {words.shape[1]} frames of words, layout has "
                f"{self.layout.num_frames}"
            )
        return words

    def extract(self, words: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-frame query readout.

        words: (B, F, L, d) or (F, L, d). Returns (frame_context, prior_embeddings)
        of shapes (B, F, K_c, d) and (B, F, K_p, d) (leading B dropped if the
        input was unbatched). Frames are processed independently by one shared
        transformer, so the result is frame-equivariant.
        """
        squeeze = words.dim() == 3
        words = self._check_words(words)
        b, f, length, d = words.shape
        flat = words.reshape(b * f, length, d)
        kc, kp = self.num_context_queries, self.num_prior_queries
        queries = torch.cat([self.context_query_bank, self.prior_query_bank], dim=0)
        x = torch.cat([queries.unsqueeze(0).expand(b * f, -1, -1), flat], dim=1)
        for layer in self.extractor:
            x = layer(x)
        frame_context = x[:, :kc, :].reshape(b, f, kc, d)
        prior_embeddings = x[:, kc:kc + kp, :].reshape(b, f, kp, d)
        if squeeze:
            return frame_context.squeeze(0), prior_embeddings.squeeze(0)
        return frame_context, prior_embeddings

    def summarize(self, frame_context: torch.Tensor) -> torch.Tensor:
        """Story-level sequence: all F*K_c context rows after joint attention.

        frame_context: (B, F, K_c, d) or (F, K_c, d). Frame-index position
        encodings are added before the summarizer, so frame order matters.
        """
        squeeze = frame_context.dim() == 3
        if squeeze:
            frame_context = frame_context.unsqueeze(0)
        b, f, kc, d = frame_context.shape
        if f != self.layout.num_frames:
            raise ConfigurationError(
                f"frame_context has {f} frames, layout has {self.layout.num_frames}"
            )
        x = frame_context + self.frame_positions[None, :, None, :]
        x = x.reshape(b, f * kc, d)
        for layer in self.summarizer:
            x = layer(x)
        return x.squeeze(0) if squeeze else x

    def predict_prior(self, prior_embeddings: torch.Tensor) -> torch.Tensor:
        """Per-frame latent prior tiles assembled into storyboard shape.

        prior_embeddings: (B, F, K_p, d) or (F, K_p, d). Returns (B, c, H, W)
        (or unbatched (c, H, W)).
        """
        squeeze = prior_embeddings.dim() == 3
        if squeeze:
            prior_embeddings = prior_embeddings.unsqueeze(0)
        b, f, kp, d = prior_embeddings.shape
        if (kp, d) != (self.num_prior_queries, self.width):
            raise ConfigurationError(
                f"prior embeddings per frame must be "
                f"({self.num_prior_queries}, {self.width}), got ({kp}, {d})"
            )
        lay = self.layout
        tiles = self.prior_head(prior_embeddings.reshape(b * f, kp * d))
        tiles = tiles.reshape(b * f, lay.channels, lay.frame_height, lay.frame_width)
        canvas = batch_to_frames(tiles, lay.grid_rows, lay.grid_cols, b)
        return canvas.squeeze(0) if squeeze else canvas

    def forward(self, words: torch.Tensor) -> ContextFeatures:
        """Full conditioning bundle from (B, F, L, d) word embeddings."""
        words = self._check_words(words)
        frame_context, prior_embeddings = self.extract(words)
        return ContextFeatures(
            frame_context=frame_context,
            global_context=self.summarize(frame_context),
            latent_prior=self.predict_prior(prior_embeddings),
        )
