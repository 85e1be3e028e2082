import numpy as np
import pytest
import torch

from src.architectures.conditional_codec import ConditionalVideoCodec
from src.experiment_planning.experiment_config import ExperimentConfig, SequenceSpec, TrainConfig
from src.training.dataloading.synthetic_sequences import generate
from tests.helpers import toy_model_config


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(0)


@pytest.fixture
def model_config():
    return toy_model_config()


@pytest.fixture
def toy_model(model_config):
    return ConditionalVideoCodec(model_config)


@pytest.fixture
def tiny_sequence():
    """16 x 16 translating texture, 6 frames, fractional motion."""
    return generate(SequenceSpec(kind='translation', height=16, width=16, frames=6, velocity=(0.5, 0.25)))


@pytest.fixture
def toy_experiment(tmp_path):
    return ExperimentConfig(
        model=toy_model_config(),
        train=TrainConfig(lmbda=64.0, frames=3, num_groups=1, steps=2, learning_rate=1e-3, log_every=1),
        sequence=SequenceSpec(kind='translation', height=16, width=16, frames=4),
        output_folder=str(tmp_path / 'run'),
    )
