import numpy as np
import pytest

from cloudadapt.config import ExperimentConfig


def small_model_config(**overrides):
    """Tiny but complete model: 2 layers, width 8, 16x16 input, two SPM blocks."""
    d = {
        "backbone": {"depth": 2, "embed_dim": 8, "heads": 2, "patch_size": 4, "img_size": 16},
        "spm": {"stem_channels": 4, "context_channels": 8, "num_blocks": 2},
        "adapter": {"rank": 2},
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            d.setdefault(key, {}).update(value)
        else:
            d[key] = value
    return ExperimentConfig.from_dict(d).model.validate()


@pytest.fixture
def small_cfg():
    return small_model_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
