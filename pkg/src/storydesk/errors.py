"""Exception types shared across the package."""


class StoryDeskError(Exception):
    """Base class for all storydesk errors."""


class LayoutError(StoryDeskError):
    """Grid arithmetic violated: bad dimensions, frame counts, or mask lengths."""


class RangeError(StoryDeskError):
    """A timestep or index falls outside its valid range."""


class ConfigurationError(StoryDeskError):
    """Invalid or mutually inconsistent configuration values."""


class VocabularyError(StoryDeskError):
    """Unknown caption attribute or token id."""


class DegenerateMaskError(StoryDeskError):
    """A mask selects nothing where a selection is required."""


class NumericError(StoryDeskError):
    """Non-finite values encountered in a numeric pipeline."""


class CheckpointError(StoryDeskError):
    """Checkpoint file is missing, corrupt, or from an incompatible version."""
