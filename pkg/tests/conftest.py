import numpy as np
import pytest
import torch

from invsteer.subject import build_subject, generate_dataset
from invsteer.train import TrainConfig, train_fmap

torch.set_num_threads(1)

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def subject():
    return build_subject()


@pytest.fixture(scope="session")
def dataset(subject):
    return generate_dataset(subject, 100, 100, 8)


@pytest.fixture(scope="session")
def trained(subject, dataset):
    """Default-config training run shared by the end-to-end tests."""
    return train_fmap(subject, dataset, TrainConfig())


@pytest.fixture(scope="session")
def trained_linear(subject, dataset):
    return train_fmap(subject, dataset, TrainConfig(feature_map="linear"))
