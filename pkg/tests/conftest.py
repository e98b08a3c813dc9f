import numpy as np
import pytest

from spatialvl.dataset import SyntheticSpec, build_vocabulary, generate_dataset
from spatialvl.model import ModelConfig


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training checks")


@pytest.fixture(scope="session")
def small_spec():
    return SyntheticSpec(num_examples=60, seed=3)


@pytest.fixture(scope="session")
def small_data(small_spec):
    return generate_dataset(small_spec)


@pytest.fixture(scope="session")
def vocab(small_spec):
    return build_vocabulary(small_spec)


@pytest.fixture(scope="session")
def toy_cfg(small_spec, vocab):
    return ModelConfig(vocab_size=len(vocab), num_categories=small_spec.num_categories,
                       feature_dim=small_spec.feature_dim)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
