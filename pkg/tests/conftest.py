"""
Shared fixtures: clean settings state and a tiny run configuration
"""

import numpy as np
import pytest

from calseg.config import Settings, build_settings, reset_settings
from calseg.datagen import LabeledImage, SegDataset


@pytest.fixture(autouse=True)
def clean_settings(monkeypatch):
    """No CALSEG_* leakage from the environment and no cached settings."""
    for var in ("CALSEG_SEED", "CALSEG_RUN_DIR", "CALSEG_THREADS", "CALSEG_LOG_LEVEL"):
        monkeypatch.delenv(var, raising=False)
    reset_settings()
    yield
    reset_settings()


TINY_OVERRIDES = {
    "data": {"height": 16, "width": 16, "source_images": 12, "target_images": 12},
    "model": {"channels": [4, 8], "tap_layer": 2, "value_channels": [4]},
    "source": {"epochs": 2, "ece_warmup_epochs": 1},
    "valuenet": {"epochs": 2},
    "target": {"rounds": 1, "epochs_per_round": 1},
    "logging": {"file": None, "use_rich": False},
}


@pytest.fixture
def tiny_settings(tmp_path) -> Settings:
    """Seconds-scale configuration writing into tmp_path/run."""
    return build_settings(overrides={**TINY_OVERRIDES, "run_dir": str(tmp_path / "run")})


def make_dataset(n: int = 4, h: int = 16, w: int = 16, num_classes: int = 3, seed: int = 0) -> SegDataset:
    rng = np.random.default_rng(seed)
    images = [
        LabeledImage(
            image=rng.random((3, h, w)).astype(np.float32),
            labels=rng.integers(0, num_classes, size=(h, w)).astype(np.uint8),
        )
        for _ in range(n)
    ]
    return SegDataset(name="toy", num_classes=num_classes, images=images)


@pytest.fixture
def toy_dataset() -> SegDataset:
    return make_dataset()


@pytest.fixture
def dataset_factory():
    return make_dataset


@pytest.fixture
def tiny_overrides() -> dict:
    return TINY_OVERRIDES
