import numpy as np
import pytest
import torch

from dplreid.occlusion_library import build_synthetic_library
from dplreid.synth_data import DatasetConfig, build_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def synthetic_library():
    return build_synthetic_library(seed=0)


@pytest.fixture(scope="session")
def tiny_dataset():
    return build_dataset(DatasetConfig(num_ids=8, cams=2, samples_per_id_per_cam=2, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
