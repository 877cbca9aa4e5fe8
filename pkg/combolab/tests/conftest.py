import numpy as np
import pytest

from combolab.data import synth_generate
from combolab.losses import BatchTargets
from combolab.model import BackboneConfig
from combolab.settings import reset_settings
from combolab.train import TrainConfig


@pytest.fixture(autouse=True)
def clean_settings(monkeypatch):
    for name in ("COMBOLAB_THREADS", "COMBOLAB_LOG_LEVEL", "COMBOLAB_LOG_FORMAT"):
        monkeypatch.delenv(name, raising=False)
    reset_settings()
    yield
    reset_settings()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_dataset():
    return synth_generate(60, (6,), 0.05, seed=3)


@pytest.fixture
def tiny_backbone():
    return BackboneConfig(stage_widths=(8, 4), reduction=2, seed=5)


@pytest.fixture
def quick_train():
    return TrainConfig(epochs=3, batch_size=16, seed=11, log_every=1)


@pytest.fixture
def five_class_targets():
    scores = np.array([1.2, 2.4, 3.0, 3.6, 4.9, 2.1])
    classes = np.array([0, 1, 2, 3, 4, 1])
    return BatchTargets(scores, classes, np.array([1.0, 0.5, 1.0, 1.0, 1.0]))
