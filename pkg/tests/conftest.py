"""Shared fixtures: one tiny model and dataset reused across test modules."""

from __future__ import annotations

import pytest

from storydesk.layout import StoryboardLayout
from storydesk.model import (StoryModel, build_story_model, desk_model_config,
                             tiny_model_config)
from storydesk.stories import generate_dataset


@pytest.fixture(scope="session")
def tiny_config():
    return tiny_model_config()


@pytest.fixture(scope="session")
def tiny_model(tiny_config) -> StoryModel:
    model = build_story_model(tiny_config, seed=0)
    model.eval()
    return model


@pytest.fixture(scope="session")
def tiny_layout(tiny_config) -> StoryboardLayout:
    return tiny_config.layout


@pytest.fixture(scope="session")
def tiny_stories(tiny_layout):
    return generate_dataset(16, seed=100, layout=tiny_layout)


@pytest.fixture(scope="session")
def desk_layout() -> StoryboardLayout:
    return desk_model_config().layout
