import numpy as np
import pytest

from cdcnn.cnc import TrainConfig
from cdcnn.datagen import GenConfig, gen_dataset
from cdcnn.evaluation import Experiment
from cdcnn.model import ModelConfig

ACCEPTANCE_LINES: list[str] = []

SMALL_GEN = GenConfig(n_residents=500, n_validation=200, labeled_fraction=0.2, days=5)
FAST_TRAIN = TrainConfig(pretrain_epochs=2, finetune_epochs=2, cotrain_batch=100, max_rounds=2, cotrain_epochs=1)


@pytest.fixture(scope="session")
def small_dataset():
    return gen_dataset(SMALL_GEN)


@pytest.fixture(scope="session")
def small_experiment():
    return Experiment(SMALL_GEN, ModelConfig(), FAST_TRAIN)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
