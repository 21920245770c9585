"""
Shared fixtures: checked numerics for the whole session, tiny and desk configs.
"""
import pytest

from app.models.config import PRESETS, ExperimentConfig, TrainSettings
from app.numcore.array import is_checked, set_checked
from app.services.model import SpatialFusionModel


@pytest.fixture(autouse=True, scope="session")
def checked_numerics():
    """Scan every op result for NaN/Inf while tests run."""
    previous = is_checked()
    set_checked(True)
    yield
    set_checked(previous)


@pytest.fixture
def tiny_cfg():
    return PRESETS["tiny"]


@pytest.fixture
def desk_cfg():
    return PRESETS["desk"]


@pytest.fixture
def tiny_settings():
    return TrainSettings(
        steps_s1=4,
        steps_s2=4,
        batch_size=2,
        val_every=2,
        val_size=4,
        semantic_prefit_steps=2,
        codec_prefit_steps=2,
        prefit_batch_size=2,
    )


@pytest.fixture
def tiny_experiment(tiny_cfg, tiny_settings):
    return ExperimentConfig(model=tiny_cfg, train=tiny_settings, seeds=(0, 1), score_scenes=2)


@pytest.fixture
def tiny_model(tiny_cfg):
    return SpatialFusionModel(tiny_cfg, seed=0)
