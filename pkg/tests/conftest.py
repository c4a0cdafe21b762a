import numpy as np
import pytest

from ppflow import ModelConfig, init_model, make_schedule


TINY = ModelConfig(d=32, depth=2, heads=2, num_classes=4, latent_channels=2, latent_size=8)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def uniform8():
    return make_schedule([], [(2, 2)], [1.0], 8)


@pytest.fixture
def two_level8():
    return make_schedule([0.5], [(4, 4), (2, 2)], [1.5, 1.5], 8)


@pytest.fixture
def three_level8():
    return make_schedule([0.5, 0.75], [(4, 4), (4, 2), (2, 2)], [1.5, 2.0, 3.0], 8)


def randomize(model, seed=0, scale=0.2):
    """Give every parameter (including zero-initialized gates and heads) random values."""
    rng = np.random.default_rng(seed)
    for k, v in model.params.items():
        model.params[k] = (scale * rng.standard_normal(v.shape)).astype(v.dtype)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
