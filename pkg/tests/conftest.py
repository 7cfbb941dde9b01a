import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from nrgan.settings import ExperimentConfig


@pytest.fixture
def rng():
    g = torch.Generator()
    g.manual_seed(1234)
    return g


@pytest.fixture
def tiny_config(tmp_path):
    """A run small enough to finish in seconds on CPU."""
    return ExperimentConfig.from_dict(
        {
            "data": {"num_train": 16, "num_test": 8},
            "train": {
                "iterations": 2,
                "batch_size": 4,
                "log_every": 1,
                "checkpoint_every": 1,
                "grid_every": 1,
            },
            "denoise": {"iterations": 2, "batch_size": 2, "log_every": 1, "num_pixels": 8},
            "eval": {"num_real": 8, "num_fake": 8, "extractor_dim": 8, "grid_rows": 2, "grid_cols": 2},
            "out_dir": str(tmp_path / "run"),
        }
    )
