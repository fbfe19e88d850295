import numpy as np
import pytest

from diarization.diarizer import PipelineConfig
from diarization.simgen import ScenarioSpec


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def linked_config() -> PipelineConfig:
    """Defaults, except that one unknown voice keeps one label."""
    return PipelineConfig(unknown_labeling="linked")


@pytest.fixture
def clean_spec() -> ScenarioSpec:
    """Noiseless scenario: every speaker visible, no detector errors."""
    return ScenarioSpec(
        n_speakers=3,
        n_onscreen=3,
        duration_ms=60_000,
        embedding_dim=16,
        centroid_min_cosine_distance=0.6,
        overlap_fraction_target=0.1,
        rng_seed=7,
        recording_id="clean",
    )


@pytest.fixture
def offscreen_spec() -> ScenarioSpec:
    """Noiseless scenario with one voice that never shows its face."""
    return ScenarioSpec(
        n_speakers=3,
        n_onscreen=2,
        duration_ms=60_000,
        embedding_dim=16,
        centroid_min_cosine_distance=0.6,
        overlap_fraction_target=0.1,
        rng_seed=11,
        recording_id="offscreen",
    )
