import numpy as np
import pytest
import torch
from helpers import ACCEPTANCE_LINES, TOY

from afin.network import ModelConfig
from afin.simulator import SimulatorConfig

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_cfg():
    return ModelConfig(**TOY)


@pytest.fixture
def toy_flow_cfg():
    return ModelConfig(**TOY, decoder="flow")


@pytest.fixture
def conjugate_sim():
    return SimulatorConfig(d_max=3, N_max=8, prior_types=("diag_gaussian",), likelihood_types=("lin_gaussian",))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
