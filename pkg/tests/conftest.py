import numpy as np
import pytest

from agave import autodiff as ad
from agave.model import AgaveModel, ModelConfig

ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    ACCEPTANCE_LINES.append((number, f"criterion {number:2d} {'PASS' if passed else 'FAIL'}: {detail}"))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


@pytest.fixture
def float64():
    with ad.precision(np.float64):
        yield


def tiny_config(**overrides):
    """Smallest geometry the model accepts, for gradient and shape tests."""
    values = dict(height=4, width=4, latent_dim=2, encoder_width=3, decoder_width=3, ar_layers=2,
                  ar_width=3, ar_first_kernel=3, ar_kernel=3, cond_width=2, seed=3)
    values.update(overrides)
    return ModelConfig(**values)


@pytest.fixture
def tiny_model():
    return AgaveModel(tiny_config(), dtype=np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
