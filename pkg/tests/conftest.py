import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from config import ExperimentConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    """Small enough for a few seconds per teacher/student pair."""
    return ExperimentConfig.model_validate({
        "name": "tiny",
        "data": {"clusters": {"num_classes": 4, "dim": 6, "n_per_class": 30, "near_distance": 2.0,
                              "far_distance": 6.0, "seed": 3},
                 "val_fraction": 0.2},
        "teacher": {"network": {"hidden": [16]},
                    "train": {"epochs": 4, "batch_size": 16, "learning_rate": 0.05, "decay_epochs": [3]},
                    "alphas": [0.0, 0.1]},
        "student": {"network": {"hidden": [8]},
                    "train": {"epochs": 3, "batch_size": 16, "learning_rate": 0.05, "decay_epochs": [2]}},
        "distill": [{"lambda": 0.0}, {"lambda": 0.5}],
        "analysis": {"topk": 2},
        "seeds": [0, 1],
    })


@pytest.fixture
def out_root(tmp_path, monkeypatch):
    monkeypatch.setenv("LSDISTILL_OUTPUT_ROOT", str(tmp_path / "runs"))
    return tmp_path
