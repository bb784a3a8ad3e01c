"""Procedural shape-story dataset with an exact attribute decoder.

A story is one character (shape + color, constant across frames — the
coherence ground truth) performing one action per frame on a per-frame
background. Frames render crisply (no anti-aliasing) from a palette chosen so
every character color sits far from every background color, which makes the
rule-based decoder exact on clean renders:

  * background = nearest palette color to the 1-pixel border ring mean
    (the character never touches the ring, by construction),
  * character  = largest 4-connected region of pixels far from the
    background color,
  * color      = nearest palette color to the region mean,
  * action     = nearest action anchor to the region's bounding-box center,
  * shape      = nearest reference in (fill-ratio, vertical-skew) space,
    with references measured from clean renders at the same frame size.

Every decode carries a confidence in [0, 1]: exactly 1.0 on clean renders
(each slot tolerates a small deviation before its confidence starts to
drop), 0.0 when no character region is found.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .captions import (
    ACTIONS,
    BACKGROUND_RGB,
    BACKGROUNDS,
    CHARACTER_COLOR_RGB,
    CHARACTER_COLORS,
    Caption,
    SHAPES,
)
from .errors import ConfigurationError
from .layout import StoryboardLayout

DATASET_FORMAT_VERSION = 1

FOREGROUND_DISTANCE = 0.35   # color distance from background that marks the character
MIN_COMPONENT_PIXELS = 10

# Per-slot confidence ramps: full confidence below `tol`, zero at `zero`.
_BG_TOL, _BG_ZERO = 0.08, 0.29
_COLOR_TOL, _COLOR_ZERO = 0.08, 0.50
_ACTION_TOL, _ACTION_ZERO = 1.5, 4.0   # pixels, scaled by frame_height/32
_SHAPE_TOL, _SHAPE_ZERO = 0.05, 0.20


@dataclass(frozen=True)
class FrameSpec:
    """Ground-truth attributes of one frame."""

    shape: str
    color: str
    action: str
    background: str

    def to_caption(self) -> Caption:
        return Caption(self.shape, self.color, self.action, self.background)

    @classmethod
    def from_caption(cls, c: Caption) -> "FrameSpec":
        if c.is_null:
            raise ConfigurationError("cannot build a frame spec from the null caption")
        return cls(c.shape, c.color, c.action, c.background)


@dataclass(frozen=True)
class Story:
    """F frames sharing one character (shape and color constant)."""

    frames: tuple[FrameSpec, ...]

    def __post_init__(self) -> None:
        if not self.frames:
            raise ConfigurationError("a story needs at least one frame")
        first = self.frames[0]
        for i, f in enumerate(self.frames):
            if (f.shape, f.color) != (first.shape, first.color):
                raise ConfigurationError(
                    f"frame {i} breaks character persistence: "
                    f"({f.shape}, {f.color}) != ({first.shape}, {first.color})"
                )

    def captions(self) -> list[Caption]:
        return [f.to_caption() for f in self.frames]


@dataclass(frozen=True)
class DecodedFrame:
    """Decoder output: nearest attributes (None when empty) plus confidence."""

    shape: str | None
    color: str | None
    action: str | None
    background: str | None
    confidence: float
    slot_confidences: dict | None = None

    @property
    def is_empty(self) -> bool:
        return self.shape is None


def generate_dataset(n: int, seed: int, layout: StoryboardLayout) -> list[Story]:
    """n stories, deterministic in (n, seed); character uniform over
    shape x color, per-frame action and background independent uniform."""
    if n < 1:
        raise ConfigurationError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    stories = []
    for _ in range(n):
        shape = SHAPES[rng.integers(len(SHAPES))]
        color = CHARACTER_COLORS[rng.integers(len(CHARACTER_COLORS))]
        frames = tuple(
            FrameSpec(
                shape=shape,
                color=color,
                action=ACTIONS[rng.integers(len(ACTIONS))],
                background=BACKGROUNDS[rng.integers(len(BACKGROUNDS))],
            )
            for _ in range(layout.num_frames)
        )
        stories.append(Story(frames))
    return stories


def action_anchor(action: str, h: int, w: int) -> tuple[float, float]:
    """Character center (row, col) for an action."""
    cy, cx = h // 2, w // 2
    dy, dx = h // 4, w // 4
    offsets = {
        "left": (0, -dx),
        "right": (0, dx),
        "up": (-dy, 0),
        "down": (dy, 0),
        "center": (0, 0),
    }
    oy, ox = offsets[action]
    return (float(cy + oy), float(cx + ox))


def _shape_half_extent(h: int) -> int:
    return max(2, round(0.2 * h))


def _shape_membership(shape: str, dy: np.ndarray, dx: np.ndarray,
                      s: int) -> np.ndarray:
    """Boolean pixel membership for a shape of half-extent s centered at 0."""
    if shape == "circle":
        return dy ** 2 + dx ** 2 <= s ** 2
    if shape == "square":
        return (np.abs(dy) <= s) & (np.abs(dx) <= s)
    if shape == "triangle":
        frac = (dy + s) / (2 * s)
        return (frac >= 0) & (frac <= 1) & (np.abs(dx) <= frac * s)
    raise ConfigurationError(f"unknown shape {shape!r}")


def render_frame(spec: FrameSpec, h: int = 32, w: int = 32) -> np.ndarray:
    """(h, w, 3) float32 image in [0, 1]; crisp shapes, no anti-aliasing."""
    img = np.empty((h, w, 3), dtype=np.float32)
    img[:] = np.array(BACKGROUND_RGB[spec.background], dtype=np.float32)
    cy, cx = action_anchor(spec.action, h, w)
    s = _shape_half_extent(h)
    ys, xs = np.mgrid[0:h, 0:w]
    member = _shape_membership(spec.shape, ys - cy, xs - cx, s)
    img[member] = np.array(CHARACTER_COLOR_RGB[spec.color], dtype=np.float32)
    return img


def render_story_canvas(story: Story, layout: StoryboardLayout) -> np.ndarray:
    """(H, W, 3) float32 storyboard canvas of the story's frames."""
    h, w = layout.frame_height, layout.frame_width
    canvas = np.zeros((layout.canvas_height, layout.canvas_width, 3),
                      dtype=np.float32)
    for i, frame in enumerate(story.frames):
        r, c = divmod(i, layout.grid_cols)
        canvas[r * h:(r + 1) * h, c * w:(c + 1) * w] = render_frame(frame, h, w)
    return canvas


def _nearest(color: np.ndarray, palette: dict[str, tuple]) -> tuple[str, float]:
    best_name, best_d = "", math.inf
    for name, rgb in palette.items():
        d = float(np.linalg.norm(color - np.array(rgb, dtype=np.float64)))
        if d < best_d:
            best_name, best_d = name, d
    return best_name, best_d


def _largest_component(fg: np.ndarray) -> np.ndarray | None:
    """Largest 4-connected True region as a boolean mask, or None."""
    h, w = fg.shape
    labels = np.zeros((h, w), dtype=np.int32)
    current = 0
    best_label, best_size = 0, 0
    for sy in range(h):
        for sx in range(w):
            if not fg[sy, sx] or labels[sy, sx]:
                continue
            current += 1
            stack = [(sy, sx)]
            labels[sy, sx] = current
            size = 0
            while stack:
                y, x = stack.pop()
                size += 1
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and fg[ny, nx] \
                            and not labels[ny, nx]:
                        labels[ny, nx] = current
                        stack.append((ny, nx))
            if size > best_size:
                best_label, best_size = current, size
    if best_size < MIN_COMPONENT_PIXELS:
        return None
    return labels == best_label


@functools.lru_cache(maxsize=None)
def _shape_references(h: int, w: int) -> dict[str, tuple[float, float]]:
    """(fill-ratio, vertical-skew) of each shape, measured from clean renders."""
    refs = {}
    for shape in SHAPES:
        img = render_frame(FrameSpec(shape, "red", "center", "white"), h, w)
        fg = np.linalg.norm(
            img.astype(np.float64) - np.array(BACKGROUND_RGB["white"]), axis=-1
        ) > FOREGROUND_DISTANCE
        refs[shape] = _shape_features(fg)
    return refs


def _shape_features(component: np.ndarray) -> tuple[float, float]:
    ys, xs = np.nonzero(component)
    y0, y1, x0, x1 = ys.min(), ys.max(), xs.min(), xs.max()
    bbox_area = (y1 - y0 + 1) * (x1 - x0 + 1)
    fill = float(len(ys)) / float(bbox_area)
    bbox_cy = (y0 + y1) / 2.0
    half_h = max(1.0, (y1 - y0) / 2.0)
    skew = float(ys.mean() - bbox_cy) / half_h
    return (fill, skew)


def _ramp(d: float, tol: float, zero: float) -> float:
    """1.0 below tol, linear to 0.0 at zero."""
    if d <= tol:
        return 1.0
    return max(0.0, 1.0 - (d - tol) / (zero - tol))


def attribute_oracle(img: np.ndarray) -> DecodedFrame:
    """Decode a frame image back to its nearest attributes with confidence."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ConfigurationError(
            f"expected an (h, w, 3) image, got shape {img.shape}"
        )
    work = img.astype(np.float64)
    h, w = work.shape[:2]
    scale = h / 32.0

    ring = np.concatenate(
        [work[0, :], work[-1, :], work[1:-1, 0], work[1:-1, -1]], axis=0
    )
    bg_name, bg_d = _nearest(ring.mean(axis=0), BACKGROUND_RGB)
    conf_bg = _ramp(bg_d, _BG_TOL, _BG_ZERO)

    fg = np.linalg.norm(
        work - np.array(BACKGROUND_RGB[bg_name], dtype=np.float64), axis=-1
    ) > FOREGROUND_DISTANCE
    component = _largest_component(fg)
    if component is None:
        return DecodedFrame(None, None, None, bg_name, 0.0)

    color_name, color_d = _nearest(
        work[component].mean(axis=0), CHARACTER_COLOR_RGB
    )
    conf_color = _ramp(color_d, _COLOR_TOL, _COLOR_ZERO)

    ys, xs = np.nonzero(component)
    center = np.array([(ys.min() + ys.max()) / 2.0, (xs.min() + xs.max()) / 2.0])
    action_name, action_d = "", math.inf
    for action in ACTIONS:
        anchor = np.array(action_anchor(action, h, w))
        d = float(np.linalg.norm(center - anchor))
        if d < action_d:
            action_name, action_d = action, d
    conf_action = _ramp(action_d, _ACTION_TOL * scale, _ACTION_ZERO * scale)

    features = np.array(_shape_features(component))
    refs = _shape_references(h, w)
    shape_name, shape_d = "", math.inf
    for shape, ref in refs.items():
        d = float(np.linalg.norm(features - np.array(ref)))
        if d < shape_d:
            shape_name, shape_d = shape, d
    conf_shape = _ramp(shape_d, _SHAPE_TOL, _SHAPE_ZERO)

    slots = {
        "background": conf_bg,
        "color": conf_color,
        "action": conf_action,
        "shape": conf_shape,
    }
    return DecodedFrame(
        shape=shape_name,
        color=color_name,
        action=action_name,
        background=bg_name,
        confidence=conf_bg * conf_color * conf_action * conf_shape,
        slot_confidences=slots,
    )


def image_to_uint8(img: np.ndarray) -> np.ndarray:
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def uint8_to_image(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float32) / 255.0


def save_dataset(stories: list[Story], root: Path | str,
                 layout: StoryboardLayout, seed: int) -> None:
    """One directory per story (frame_<i>.png + story.json) plus manifest.json."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for idx, story in enumerate(stories):
        story_dir = root / f"story_{idx:05d}"
        story_dir.mkdir(exist_ok=True)
        for i, frame in enumerate(story.frames):
            img = render_frame(frame, layout.frame_height, layout.frame_width)
            Image.fromarray(image_to_uint8(img)).save(story_dir / f"frame_{i}.png")
        captions = [f.to_caption().to_json() for f in story.frames]
        (story_dir / "story.json").write_text(
            json.dumps(captions, indent=2, sort_keys=True) + "\n"
        )
    manifest = {
        "n": len(stories),
        "seed": seed,
        "layout": layout.to_json(),
        "format_version": DATASET_FORMAT_VERSION,
    }
    (root / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


def load_dataset(root: Path | str) -> tuple[list[Story], StoryboardLayout, dict]:
    """Read stories and layout back from a dataset directory."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ConfigurationError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise ConfigurationError(
            f"dataset format_version {manifest.get('format_version')} "
            f"unsupported (expected {DATASET_FORMAT_VERSION})"
        )
    layout = StoryboardLayout.from_json(manifest["layout"])
    stories = []
    for idx in range(int(manifest["n"])):
        story_json = (root / f"story_{idx:05d}" / "story.json").read_text()
        frames = tuple(
            FrameSpec.from_caption(Caption.from_json(obj))
            for obj in json.loads(story_json)
        )
        stories.append(Story(frames))
    return stories, layout, manifest


def load_frame_image(root: Path | str, story_idx: int, frame_idx: int) -> np.ndarray:
    path = Path(root) / f"story_{story_idx:05d}" / f"frame_{frame_idx}.png"
    return uint8_to_image(np.asarray(Image.open(path).convert("RGB")))
