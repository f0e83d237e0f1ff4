import numpy as np
import pytest

from certismooth.classifier import train_classifier
from certismooth.data import make_gmm_world, sample_dataset
from certismooth.schedule import build_schedule


@pytest.fixture(scope="session")
def schedule():
    return build_schedule("cosine", 1000)


@pytest.fixture(scope="session")
def world():
    return make_gmm_world(4, 64, 0.08, seed=0)


@pytest.fixture(scope="session")
def small_world():
    return make_gmm_world(3, 8, 0.08, seed=3)


@pytest.fixture(scope="session")
def trained_classifier(world):
    return train_classifier(sample_dataset(world, 250, 0, "train"), world.K, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    lines = [value for reports in terminalreporter.stats.values() for rep in reports
             for key, value in getattr(rep, "user_properties", ()) if key == "criterion"
             and getattr(rep, "when", "call") == "call"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
