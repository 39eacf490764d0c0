import numpy as np
import pytest

from flexdepth.model import ModelConfig, ModelParams

_acceptance_results: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        _acceptance_results[report.nodeid.split("::")[-1]] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if _acceptance_results:
        terminalreporter.write_sep("-", "acceptance criteria")
        for name, outcome in sorted(_acceptance_results.items()):
            terminalreporter.write_line(f"{name}: {outcome.upper()}")


@pytest.fixture
def tiny_config():
    return ModelConfig(encoder_layers=2, decoder_layers=2, d_model=16, heads=2,
                       d_ff=32, vocab_size=13, max_len=12, dropout=0.0,
                       label_smoothing=0.0)


@pytest.fixture
def tiny_params(tiny_config):
    return ModelParams.initialize(tiny_config, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
