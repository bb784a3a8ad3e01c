"""Storyboard grid arithmetic.

A storyboard tiles F frames into a single R x C canvas so the whole story can
be treated as one image. Frame order is row-major: frame i sits at grid row
i // C, column i % C. Everything here is a pure function of its inputs;
round-trips between the canvas and the frame list are bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import LayoutError, NumericError


@dataclass(frozen=True)
class StoryboardLayout:
    """Static geometry of a storyboard: frame count, grid shape, frame size."""

    num_frames: int
    grid_rows: int
    grid_cols: int
    frame_height: int
    frame_width: int
    channels: int = 3

    def __post_init__(self) -> None:
        if self.grid_rows * self.grid_cols != self.num_frames:
            raise LayoutError(
                f"grid {self.grid_rows}x{self.grid_cols} does not hold "
                f"{self.num_frames} frames"
            )
        for name in ("num_frames", "grid_rows", "grid_cols", "frame_height",
                     "frame_width", "channels"):
            if getattr(self, name) < 1:
                raise LayoutError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def canvas_height(self) -> int:
        return self.grid_rows * self.frame_height

    @property
    def canvas_width(self) -> int:
        return self.grid_cols * self.frame_width

    @property
    def canvas_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.canvas_height, self.canvas_width)

    def frame_region(self, index: int) -> tuple[slice, slice]:
        """Row/column slices of frame `index` on the canvas."""
        if not 0 <= index < self.num_frames:
            raise LayoutError(f"frame index {index} outside [0, {self.num_frames})")
        r, c = divmod(index, self.grid_cols)
        return (
            slice(r * self.frame_height, (r + 1) * self.frame_height),
            slice(c * self.frame_width, (c + 1) * self.frame_width),
        )

    def to_json(self) -> dict:
        return {
            "num_frames": self.num_frames,
            "grid_rows": self.grid_rows,
            "grid_cols": self.grid_cols,
            "frame_height": self.frame_height,
            "frame_width": self.frame_width,
            "channels": self.channels,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "StoryboardLayout":
        return cls(**{k: int(obj[k]) for k in (
            "num_frames", "grid_rows", "grid_cols",
            "frame_height", "frame_width", "channels")})


@dataclass(frozen=True)
class FrameMask:
    """Per-frame boolean selector; True marks a frame to generate."""

    bits: tuple[bool, ...]

    def __post_init__(self) -> None:
        if len(self.bits) < 1:
            raise LayoutError("mask must cover at least one frame")
        object.__setattr__(self, "bits", tuple(bool(b) for b in self.bits))

    def __len__(self) -> int:
        return len(self.bits)

    @property
    def num_targets(self) -> int:
        return sum(self.bits)

    @property
    def any_target(self) -> bool:
        return any(self.bits)

    @property
    def all_target(self) -> bool:
        return all(self.bits)

    @classmethod
    def from_string(cls, text: str) -> "FrameMask":
        """Parse a bit string such as '0110' (1 = generate that frame)."""
        if not text or set(text) - {"0", "1"}:
            raise LayoutError(f"mask string must be nonempty 0/1 digits, got {text!r}")
        return cls(tuple(ch == "1" for ch in text))

    @classmethod
    def full(cls, num_frames: int) -> "FrameMask":
        return cls((True,) * num_frames)

    def to_string(self) -> str:
        return "".join("1" if b else "0" for b in self.bits)


@dataclass(frozen=True)
class LatentStoryboard:
    """A storyboard-shaped value grid plus the layout that interprets it."""

    data: torch.Tensor
    layout: StoryboardLayout

    def __post_init__(self) -> None:
        expected = self.layout.canvas_shape
        if tuple(self.data.shape) != expected:
            raise LayoutError(
                f"data shape {tuple(self.data.shape)} does not match layout "
                f"canvas {expected}"
            )
        if not torch.isfinite(self.data).all():
            raise NumericError("storyboard contains non-finite values")


def split_frames(sb: LatentStoryboard) -> list[torch.Tensor]:
    """Cut the canvas into its F frames, row-major, without altering values."""
    frames = []
    for i in range(sb.layout.num_frames):
        rows, cols = sb.layout.frame_region(i)
        frames.append(sb.data[:, rows, cols].clone())
    return frames


def assemble(frames: list[torch.Tensor], layout: StoryboardLayout) -> LatentStoryboard:
    """Inverse of split_frames: tile F frames back into one canvas."""
    if len(frames) != layout.num_frames:
        raise LayoutError(
            f"expected {layout.num_frames} frames, got {len(frames)}"
        )
    frame_shape = (layout.channels, layout.frame_height, layout.frame_width)
    canvas = torch.empty(layout.canvas_shape, dtype=frames[0].dtype)
    for i, frame in enumerate(frames):
        if tuple(frame.shape) != frame_shape:
            raise LayoutError(
                f"frame {i} has shape {tuple(frame.shape)}, expected {frame_shape}"
            )
        rows, cols = layout.frame_region(i)
        canvas[:, rows, cols] = frame
    return LatentStoryboard(canvas, layout)


def pixel_mask(mask: FrameMask, layout: StoryboardLayout,
               dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Broadcast a frame mask to pixel granularity: 1 inside target frames."""
    if len(mask) != layout.num_frames:
        raise LayoutError(
            f"mask covers {len(mask)} frames but layout has {layout.num_frames}"
        )
    grid = torch.zeros(layout.canvas_shape, dtype=dtype)
    for i, bit in enumerate(mask.bits):
        if bit:
            rows, cols = layout.frame_region(i)
            grid[:, rows, cols] = 1.0
    return grid


def frames_to_batch(x: torch.Tensor, rows: int, cols: int) -> torch.Tensor:
    """Fold the frame grid of a (B, C, H, W) canvas batch into the batch axis.

    Returns (B * F, C, H/rows, W/cols) with frames in row-major order, so
    per-frame operations can run as one batched call.
    """
    b, ch, h, w = x.shape
    if h % rows or w % cols:
        raise LayoutError(f"canvas {h}x{w} not divisible into {rows}x{cols} tiles")
    fh, fw = h // rows, w // cols
    x = x.reshape(b, ch, rows, fh, cols, fw)
    x = x.permute(0, 2, 4, 1, 3, 5)
    return x.reshape(b * rows * cols, ch, fh, fw)


def batch_to_frames(x: torch.Tensor, rows: int, cols: int, batch: int) -> torch.Tensor:
    """Inverse of frames_to_batch."""
    bf, ch, fh, fw = x.shape
    if bf != batch * rows * cols:
        raise LayoutError(
            f"folded batch {bf} does not factor as {batch}*{rows}*{cols}"
        )
    x = x.reshape(batch, rows, cols, ch, fh, fw)
    x = x.permute(0, 3, 1, 4, 2, 5)
    return x.reshape(batch, ch, rows * fh, cols * fw)
