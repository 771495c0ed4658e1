import numpy as np
import pytest

from glidn.synthdata import GenConfig, Rng, generate
from glidn.train import TrainConfig, prepare


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def prng():
    return Rng(7)


@pytest.fixture(scope="session")
def tiny_videos():
    return generate(GenConfig(num_videos=24, frames_per_video=4), seed=11)


@pytest.fixture(scope="session")
def tiny_multilabel():
    return generate(GenConfig(num_videos=16, frames_per_video=4, mode="multi_label"), seed=5)


@pytest.fixture
def tiny_cfg():
    return TrainConfig(epochs=2, decay_every=1, batch_size=8, hidden_dim=6, n_classes=8, seed=3)


@pytest.fixture(scope="session")
def tiny_prepared(tiny_videos):
    return prepare(tiny_videos)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
