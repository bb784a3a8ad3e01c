"""Desk-scale masked storyboard diffusion.

One trained model covers story visualization (generate every frame),
continuation (generate all frames after given ones), and completion (generate
an arbitrary subset) — the task is expressed purely as a frame mask.
"""

from .errors import (
    CheckpointError,
    ConfigurationError,
    DegenerateMaskError,
    LayoutError,
    NumericError,
    RangeError,
    StoryDeskError,
    VocabularyError,
)
from .layout import FrameMask, LatentStoryboard, StoryboardLayout

__all__ = [
    "CheckpointError",
    "ConfigurationError",
    "DegenerateMaskError",
    "FrameMask",
    "LatentStoryboard",
    "LayoutError",
    "NumericError",
    "RangeError",
    "StoryDeskError",
    "StoryboardLayout",
    "VocabularyError",
]

__version__ = "0.1.0"
