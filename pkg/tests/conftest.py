import numpy as np
import pytest

from prunekit.data import split, synth_dataset
from prunekit.model_graph import build_mini_resnet
from prunekit.trainer import TrainConfig, fine_tune

SHAPE = (3, 12, 12)


@pytest.fixture(scope="session")
def synth_splits():
    ds = synth_dataset(0, 800, 5, SHAPE, noise=1.0)
    return split(ds, 0.25, 0)


@pytest.fixture(scope="session")
def trained_mini(synth_splits):
    """A small bottleneck ResNet trained to high accuracy on the synthetic task."""
    train, val = synth_splits
    model = build_mini_resnet(2, 1, 8, 5, input_shape=SHAPE, seed=0)
    model, _, history = fine_tune(model, train, val, None, TrainConfig(epochs=4, learning_rate=0.05, batch_size=32))
    assert history[-1]["val_top1"] > 0.9
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
