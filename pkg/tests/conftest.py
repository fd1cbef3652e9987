import numpy as np
import pytest
import torch

from galtraj.diffusion import TrajectoryDenoiser
from galtraj.world import DatasetConfig, synthesize_dataset

torch.set_num_threads(1)

ACCEPTANCE_LINES: list = []


@pytest.fixture
def record_criterion():
    """Append one pass/fail line for the acceptance summary."""

    def record(name, passed, detail=""):
        ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_scenarios():
    return synthesize_dataset(DatasetConfig(count=60), seed=3)


@pytest.fixture(scope="session")
def denoiser_data():
    return synthesize_dataset(DatasetConfig(count=300), seed=11)


@pytest.fixture(scope="session")
def trained_denoiser(denoiser_data):
    """A small denoiser, trained once per session."""
    return TrajectoryDenoiser(n_epochs=30, hidden_dim=64, random_state=0).fit(denoiser_data)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
