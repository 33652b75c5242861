import numpy as np
import pytest
from hypothesis import settings

from spectral_cnn.dataio import DatasetManifest
from spectral_cnn.simulator import make_dataset
from spectral_cnn.spectra import default_axis

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_axis():
    return default_axis(96)


@pytest.fixture(scope="session")
def small_manifest(small_axis):
    records = make_dataset(24, axis=small_axis, seed=5, shots_per_target=3)
    return DatasetManifest(records, small_axis, provenance="synthetic seed=5")


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = sorted(getattr(config, "acceptance_lines", []))
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
