import numpy as np
import pytest

from pcmoe.data import DatasetSpec, synth_dataset
from pcmoe.model import ModelConfig
from pcmoe.protocol import TrainConfig


def tiny_train_config(n=4, epochs=2, **model_kwargs) -> TrainConfig:
    return TrainConfig(model=ModelConfig(**model_kwargs), n=n, epochs=epochs, batch_size=4, lr=0.05, expert_lr=0.1, seed=3)


@pytest.fixture
def tiny_data():
    def make(n=4, seed=3, examples=16):
        return synth_dataset(DatasetSpec(examples_per_party=examples, test_size=16), n, seed)

    return make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
