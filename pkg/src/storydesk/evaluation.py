"""Evaluation: exact attribute metrics plus Fréchet distances in the feature
space of a small learned probe.

Accuracy and consistency use the rule-based frame decoder (exact ground
truth). The probe exists only because Fréchet distances need a feature space:
it is trained on real rendered frames, then frozen.

Two Fréchet variants:
  * frame_frechet — over per-frame features; order-insensitive, the
    image-quality analogue;
  * story_frechet — over per-story concatenations of the F frame features in
    temporal order; reordering frames changes it, so it is the
    temporal-coherence analogue.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .blocks import deterministic_init
from .captions import ACTIONS, BACKGROUNDS, CHARACTER_COLORS, SHAPES
from .checkpoint import read_container, write_container
from .errors import CheckpointError, ConfigurationError
from .layout import FrameMask, StoryboardLayout, frames_to_batch
from .model import StoryModel
from .sampler import SamplerConfig, ddim_masked_sample_batch
from .stories import (
    DecodedFrame,
    Story,
    attribute_oracle,
    image_to_uint8,
    render_story_canvas,
    uint8_to_image,
)

PROBE_FEATURE_WIDTH = 32

_SLOT_VOCABS = {
    "shape": SHAPES,
    "color": CHARACTER_COLORS,
    "action": ACTIONS,
    "background": BACKGROUNDS,
}


class ProbeModel(nn.Module):
    """Small conv classifier over single frames; its penultimate layer is the
    feature space for the Fréchet metrics."""

    def __init__(self, frame_height: int, frame_width: int,
                 feature_width: int = PROBE_FEATURE_WIDTH) -> None:
        super().__init__()
        self.frame_height = frame_height
        self.frame_width = frame_width
        self.feature_width = feature_width
        self.conv = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1), nn.SiLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(32, 32, 3, stride=2, padding=1), nn.SiLU(),
        )
        self.project = nn.Linear(32, feature_width)
        self.norm = nn.LayerNorm(feature_width)
        self.heads = nn.ModuleDict({
            slot: nn.Linear(feature_width, len(vocab))
            for slot, vocab in _SLOT_VOCABS.items()
        })
        self.register_buffer("trained_flag", torch.zeros(1))

    @property
    def is_trained(self) -> bool:
        return bool(self.trained_flag.item() > 0.5)

    def mark_trained(self) -> None:
        self.trained_flag.fill_(1.0)

    def features(self, frames: torch.Tensor) -> torch.Tensor:
        """(N, 3, h, w) images in [0,1] -> (N, p) features."""
        x = frames * 2.0 - 1.0
        x = self.conv(x).mean(dim=(2, 3))
        return self.norm(self.project(x))

    def forward(self, frames: torch.Tensor) -> dict[str, torch.Tensor]:
        feats = self.features(frames)
        return {slot: head(feats) for slot, head in self.heads.items()}


def train_probe(frames: torch.Tensor, labels: dict[str, torch.Tensor],
                frame_height: int, frame_width: int,
                epochs: int = 8, batch_size: int = 64, lr: float = 2e-3,
                seed: int = 0) -> ProbeModel:
    """Fit the probe on real frames. labels: slot -> (N,) class indices."""
    with deterministic_init(seed):
        probe = ProbeModel(frame_height, frame_width)
    optimizer = torch.optim.Adam(probe.parameters(), lr=lr)
    n = frames.shape[0]
    rng = np.random.default_rng(seed)
    probe.train()
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = torch.from_numpy(order[start:start + batch_size])
            logits = probe(frames[idx])
            loss = sum(
                F.cross_entropy(logits[slot], labels[slot][idx])
                for slot in _SLOT_VOCABS
            )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
    probe.eval()
    probe.mark_trained()
    return probe


def save_probe(probe: ProbeModel, path: Path | str) -> None:
    tensors = {k: v.detach().cpu().numpy() for k, v in probe.state_dict().items()}
    metadata = {
        "format_version": 1,
        "kind": "probe",
        "frame_height": probe.frame_height,
        "frame_width": probe.frame_width,
        "feature_width": probe.feature_width,
    }
    write_container(path, metadata, tensors)


def load_probe(path: Path | str) -> ProbeModel:
    metadata, tensors = read_container(path)
    if metadata.get("kind") != "probe":
        raise CheckpointError(
            f"expected a probe checkpoint, found kind {metadata.get('kind')!r}"
        )
    probe = ProbeModel(
        int(metadata["frame_height"]), int(metadata["frame_width"]),
        int(metadata["feature_width"]),
    )
    probe.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    probe.eval()
    return probe


def gaussian_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and covariance of (N, D) features, in float64."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ConfigurationError(f"features must be (N, D), got {feats.shape}")
    mean = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False)
    cov = np.atleast_2d(cov)
    return mean, cov


def frechet(mean_a: np.ndarray, cov_a: np.ndarray,
            mean_b: np.ndarray, cov_b: np.ndarray) -> float:
    """|mu_a - mu_b|^2 + Tr(A + B - 2 sqrt(A^1/2 B A^1/2)), clamped at 0.

    Covariances are symmetrized and eigenvalue-floored at 1e-10 first; the
    matrix square roots go through eigendecompositions of symmetric matrices,
    so the result is real by construction.
    """
    mean_a = np.atleast_1d(np.asarray(mean_a, dtype=np.float64))
    mean_b = np.atleast_1d(np.asarray(mean_b, dtype=np.float64))
    cov_a = np.atleast_2d(np.asarray(cov_a, dtype=np.float64))
    cov_b = np.atleast_2d(np.asarray(cov_b, dtype=np.float64))
    if mean_a.shape != mean_b.shape or cov_a.shape != cov_b.shape \
            or cov_a.shape != (mean_a.size, mean_a.size):
        raise ConfigurationError(
            f"dimension mismatch: means {mean_a.shape}/{mean_b.shape}, "
            f"covs {cov_a.shape}/{cov_b.shape}"
        )

    def repair(c: np.ndarray) -> np.ndarray:
        sym = (c + c.T) / 2.0
        w, v = np.linalg.eigh(sym)
        return (v * np.maximum(w, 1e-10)) @ v.T

    a = repair(cov_a)
    b = repair(cov_b)
    wa, va = np.linalg.eigh(a)
    sqrt_a = (va * np.sqrt(np.maximum(wa, 0.0))) @ va.T
    inner = sqrt_a @ b @ sqrt_a
    inner = (inner + inner.T) / 2.0
    wi = np.linalg.eigvalsh(inner)
    trace_sqrt = float(np.sqrt(np.maximum(wi, 0.0)).sum())
    diff = mean_a - mean_b
    value = float(diff @ diff + np.trace(a) + np.trace(b) - 2.0 * trace_sqrt)
    return max(0.0, value)


def frechet_from_features(features_a: np.ndarray, features_b: np.ndarray) -> float:
    return frechet(*gaussian_stats(features_a), *gaussian_stats(features_b))


def frame_feature_matrix(probe: ProbeModel, frames: torch.Tensor,
                         batch_size: int = 256) -> np.ndarray:
    """(N, 3, h, w) frames -> (N, p) probe features."""
    outs = []
    with torch.no_grad():
        for start in range(0, frames.shape[0], batch_size):
            outs.append(probe.features(frames[start:start + batch_size]).numpy())
    return np.concatenate(outs, axis=0)


def story_feature_matrix(frame_features: np.ndarray, num_frames: int) -> np.ndarray:
    """Concatenate each story's F frame features in order: (N*F, p) -> (N, F*p)."""
    n, p = frame_features.shape
    if n % num_frames:
        raise ConfigurationError(
            f"{n} frame features do not group into stories of {num_frames}"
        )
    return frame_features.reshape(n // num_frames, num_frames * p)


@dataclass
class MetricReport:
    preset: str
    frame_frechet: float
    story_frechet: float
    attribute_accuracy: dict[str, float]
    character_consistency: float
    n_stories: int
    n_generated_frames: int
    decodes: list[list[DecodedFrame]] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return {
            "preset": self.preset,
            "frame_frechet": self.frame_frechet,
            "story_frechet": self.story_frechet,
            "attribute_accuracy": dict(self.attribute_accuracy),
            "character_consistency": self.character_consistency,
            "n_stories": self.n_stories,
            "n_generated_frames": self.n_generated_frames,
        }

    def format_table(self) -> str:
        lines = [
            f"preset                 {self.preset}",
            f"stories                {self.n_stories}",
            f"generated frames       {self.n_generated_frames}",
            f"frame_frechet          {self.frame_frechet:.4f}",
            f"story_frechet          {self.story_frechet:.4f}",
            f"character_consistency  {self.character_consistency:.4f}",
        ]
        for slot in ("shape", "color", "action", "background"):
            lines.append(
                f"accuracy[{slot:<10}]    {self.attribute_accuracy[slot]:.4f}"
            )
        return "\n".join(lines)

    def write_csv(self, path: Path | str) -> None:
        """Per-frame decode dump for inspection."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["story", "frame", "shape", "color", "action", "background",
                 "confidence"]
            )
            for s, frames in enumerate(self.decodes):
                for i, d in enumerate(frames):
                    writer.writerow(
                        [s, i, d.shape, d.color, d.action, d.background,
                         f"{d.confidence:.4f}"]
                    )


def preset_masks(preset: str, stories: list[Story], layout: StoryboardLayout,
                 seed: int, given_count: int = 2) -> list[FrameMask]:
    """Frame masks per story for a task preset.

    visualize: all frames generated. continue: frame 0 given. complete:
    `given_count` randomly chosen frames given (seeded)."""
    f = layout.num_frames
    if preset == "visualize":
        return [FrameMask.full(f) for _ in stories]
    if preset == "continue":
        return [FrameMask((False,) + (True,) * (f - 1)) for _ in stories]
    if preset == "complete":
        if not 1 <= given_count < f:
            raise ConfigurationError(
                f"given_count must lie in [1, {f - 1}], got {given_count}"
            )
        rng = np.random.default_rng(seed)
        masks = []
        for _ in stories:
            given = rng.choice(f, size=given_count, replace=False)
            masks.append(FrameMask(tuple(i not in given for i in range(f))))
        return masks
    raise ConfigurationError(f"unknown preset {preset!r}")


def _canvas_to_frames_uint8(canvas: torch.Tensor,
                            layout: StoryboardLayout) -> list[np.ndarray]:
    """(3, H, W) float canvas in [0,1] -> F (h, w, 3) uint8-quantized images."""
    tiles = frames_to_batch(canvas.unsqueeze(0), layout.grid_rows,
                            layout.grid_cols)
    frames = []
    for i in range(layout.num_frames):
        img = tiles[i].permute(1, 2, 0).numpy()
        frames.append(uint8_to_image(image_to_uint8(img)))
    return frames


def evaluate(model: StoryModel, probe: ProbeModel, stories: list[Story],
             preset: str, sampler: SamplerConfig, seed: int = 0,
             given_count: int = 2, batch_size: int = 16,
             masks: list[FrameMask] | None = None) -> MetricReport:
    """Generate per the preset mask and score against exact ground truth."""
    if not probe.is_trained:
        raise ConfigurationError("probe must be trained before evaluation")
    layout = model.layout
    if masks is None:
        masks = preset_masks(preset, stories, layout, seed, given_count)
    if len(masks) != len(stories):
        raise ConfigurationError(
            f"{len(masks)} masks for {len(stories)} stories"
        )

    min_frames = 2 * probe.feature_width
    if len(stories) * layout.num_frames < min_frames:
        warnings.warn(
            f"fewer than {min_frames} frames; Fréchet covariances may be "
            f"unstable", stacklevel=2,
        )

    gen_frames: list[np.ndarray] = []
    out_stories_frames: list[list[np.ndarray]] = []
    real_frames: list[np.ndarray] = []
    decodes: list[list[DecodedFrame]] = []

    for start in range(0, len(stories), batch_size):
        chunk = stories[start:start + batch_size]
        chunk_masks = masks[start:start + batch_size]
        real = np.stack([render_story_canvas(s, layout) for s in chunk])
        x0 = model.codec.encode(
            torch.from_numpy(real).permute(0, 3, 1, 2).contiguous()
        )
        batch_cfg = SamplerConfig(
            steps=sampler.steps, guidance_scale=sampler.guidance_scale,
            eta=sampler.eta, seed=sampler.seed + seed + start,
            clamp_predictions=sampler.clamp_predictions,
        )
        out = ddim_masked_sample_batch(
            model, x0, chunk_masks, [s.captions() for s in chunk], batch_cfg
        )
        decoded = model.codec.decode(out).clamp(0.0, 1.0)
        for b, story in enumerate(chunk):
            frames = _canvas_to_frames_uint8(decoded[b], layout)
            out_stories_frames.append(frames)
            real_canvas = torch.from_numpy(real[b]).permute(2, 0, 1)
            real_frames.extend(_canvas_to_frames_uint8(real_canvas, layout))
            for i, bit in enumerate(chunk_masks[b].bits):
                if bit:
                    gen_frames.append(frames[i])

    slot_hits = {slot: 0 for slot in _SLOT_VOCABS}
    slot_total = 0
    consistent = 0
    for story, frames, mask in zip(stories, out_stories_frames, masks):
        story_decodes = [attribute_oracle(f) for f in frames]
        decodes.append(story_decodes)
        for i, bit in enumerate(mask.bits):
            if not bit:
                continue
            truth = story.frames[i]
            d = story_decodes[i]
            slot_total += 1
            slot_hits["shape"] += int(d.shape == truth.shape)
            slot_hits["color"] += int(d.color == truth.color)
            slot_hits["action"] += int(d.action == truth.action)
            slot_hits["background"] += int(d.background == truth.background)
        identities = {(d.shape, d.color) for d in story_decodes}
        if len(identities) == 1 and None not in next(iter(identities)):
            consistent += 1

    def to_tensor(frames: list[np.ndarray]) -> torch.Tensor:
        return torch.from_numpy(np.stack(frames)).permute(0, 3, 1, 2).contiguous()

    real_feats = frame_feature_matrix(probe, to_tensor(real_frames))
    gen_feats = frame_feature_matrix(probe, to_tensor(gen_frames))
    all_out_frames = [f for frames in out_stories_frames for f in frames]
    out_feats = frame_feature_matrix(probe, to_tensor(all_out_frames))

    frame_fd = frechet_from_features(gen_feats, real_feats)
    story_fd = frechet_from_features(
        story_feature_matrix(out_feats, layout.num_frames),
        story_feature_matrix(real_feats, layout.num_frames),
    )

    return MetricReport(
        preset=preset,
        frame_frechet=frame_fd,
        story_frechet=story_fd,
        attribute_accuracy={
            slot: (slot_hits[slot] / slot_total if slot_total else float("nan"))
            for slot in _SLOT_VOCABS
        },
        character_consistency=consistent / len(stories),
        n_stories=len(stories),
        n_generated_frames=slot_total,
        decodes=decodes,
    )


def probe_training_data(stories: list[Story],
                        layout: StoryboardLayout) -> tuple[torch.Tensor, dict]:
    """Rendered frames and class labels for probe training."""
    frames = []
    labels: dict[str, list[int]] = {slot: [] for slot in _SLOT_VOCABS}
    from .stories import render_frame

    for story in stories:
        for frame in story.frames:
            frames.append(render_frame(frame, layout.frame_height,
                                       layout.frame_width))
            labels["shape"].append(SHAPES.index(frame.shape))
            labels["color"].append(CHARACTER_COLORS.index(frame.color))
            labels["action"].append(ACTIONS.index(frame.action))
            labels["background"].append(BACKGROUNDS.index(frame.background))
    x = torch.from_numpy(np.stack(frames)).permute(0, 3, 1, 2).contiguous()
    y = {slot: torch.tensor(v, dtype=torch.long) for slot, v in labels.items()}
    return x, y
