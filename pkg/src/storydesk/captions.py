"""Structured caption vocabulary, fixed-slot tokenizer, and text encoder.

Captions are four enum slots: character shape, character color, action, and
background color. Each caption tokenizes to exactly L=5 ids (BOS + four
slots). A reserved all-null caption supports classifier-free guidance.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .blocks import TransformerLayer, deterministic_init
from .errors import VocabularyError

SHAPES = ("circle", "square", "triangle")
CHARACTER_COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan")
ACTIONS = ("left", "right", "up", "down", "center")
BACKGROUNDS = ("white", "lightgray", "darkgray", "black")

CHARACTER_COLOR_RGB: dict[str, tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
}
BACKGROUND_RGB: dict[str, tuple[float, float, float]] = {
    "white": (1.0, 1.0, 1.0),
    "lightgray": (2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0),
    "darkgray": (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0),
    "black": (0.0, 0.0, 0.0),
}

NULL_ID = 0
BOS_ID = 1
SEQ_LEN = 5  # BOS + four slots

_SLOT_VOCABS = (SHAPES, CHARACTER_COLORS, ACTIONS, BACKGROUNDS)


def _build_token_table() -> dict[str, int]:
    table: dict[str, int] = {}
    next_id = 2
    for vocab in _SLOT_VOCABS:
        for word in vocab:
            table[word] = next_id
            next_id += 1
    return table


TOKEN_IDS = _build_token_table()
VOCAB_SIZE = 2 + sum(len(v) for v in _SLOT_VOCABS)


@dataclass(frozen=True)
class Caption:
    """One frame's description; all slots set, or all None for the null caption."""

    shape: str | None
    color: str | None
    action: str | None
    background: str | None

    def __post_init__(self) -> None:
        values = (self.shape, self.color, self.action, self.background)
        if all(v is None for v in values):
            return
        for value, vocab, slot in zip(
            values, _SLOT_VOCABS, ("shape", "color", "action", "background")
        ):
            if value not in vocab:
                raise VocabularyError(f"unknown {slot} value {value!r}")

    @property
    def is_null(self) -> bool:
        return self.shape is None

    @classmethod
    def null(cls) -> "Caption":
        return cls(None, None, None, None)

    def to_json(self) -> dict:
        if self.is_null:
            raise VocabularyError("the null caption has no JSON form")
        return {
            "shape": self.shape,
            "color": self.color,
            "action": self.action,
            "background": self.background,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Caption":
        missing = {"shape", "color", "action", "background"} - set(obj)
        if missing:
            raise VocabularyError(f"caption missing fields: {sorted(missing)}")
        return cls(obj["shape"], obj["color"], obj["action"], obj["background"])


def all_captions() -> list[Caption]:
    """Every valid non-null caption (3*6*5*4 = 360 of them)."""
    return [
        Caption(s, c, a, b)
        for s in SHAPES
        for c in CHARACTER_COLORS
        for a in ACTIONS
        for b in BACKGROUNDS
    ]


def tokenize(caption: Caption) -> tuple[int, ...]:
    """Fixed-slot token ids: [BOS, shape, color, action, background]."""
    if caption.is_null:
        return (BOS_ID,) + (NULL_ID,) * 4
    return (
        BOS_ID,
        TOKEN_IDS[caption.shape],
        TOKEN_IDS[caption.color],
        TOKEN_IDS[caption.action],
        TOKEN_IDS[caption.background],
    )


def tokenize_story(captions: list[Caption]) -> torch.Tensor:
    """Token ids for F frame captions as an (F, L) long tensor."""
    return torch.tensor([tokenize(c) for c in captions], dtype=torch.long)


class TextEncoder(nn.Module):
    """Token embedding table + learned positions + one transformer layer.

    Maps an (..., L) id tensor to (..., L, d) word embeddings; trained jointly
    with the rest of the model.
    """

    def __init__(self, width: int = 64, heads: int = 4) -> None:
        super().__init__()
        self.width = width
        self.token_embedding = nn.Embedding(VOCAB_SIZE, width)
        self.position_embedding = nn.Parameter(torch.randn(SEQ_LEN, width) * 0.02)
        self.layer = TransformerLayer(width, heads)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.min().item() < 0 or tokens.max().item() >= VOCAB_SIZE:
            raise VocabularyError(
                f"token ids must lie in [0, {VOCAB_SIZE}), got "
                f"[{tokens.min().item()}, {tokens.max().item()}]"
            )
        lead = tokens.shape[:-1]
        flat = tokens.reshape(-1, tokens.shape[-1])
        x = self.token_embedding(flat) + self.position_embedding[None, :, :]
        x = self.layer(x)
        return x.reshape(*lead, tokens.shape[-1], self.width)

    def encode(self, caption: Caption) -> torch.Tensor:
        """(L, d) embedding matrix for one caption."""
        tokens = torch.tensor([tokenize(caption)], dtype=torch.long)
        return self.forward(tokens)[0]


def build_text_encoder(width: int = 64, heads: int = 4, seed: int = 0) -> TextEncoder:
    with deterministic_init(seed):
        return TextEncoder(width=width, heads=heads)
