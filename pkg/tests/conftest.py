import numpy as np
import pytest

from app.config import TrainConfig
from helpers import make_feature_records


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return TrainConfig(
        head="tkan",
        width=8,
        sub_width=4,
        clip_length=4,
        input_mode="features",
        lstm_widths=(6, 4),
        transformer_heads=2,
        transformer_ff=16,
        batch_size=4,
        max_epochs=2,
        seed=7,
    )


@pytest.fixture
def feature_records():
    return make_feature_records()
