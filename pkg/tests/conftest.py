import sys

import numpy as np
import pytest
import torch

from jointfuse.data import DatasetManifest
from jointfuse.synth import make_toy_dataset


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    make_toy_dataset(root, "train", n_pairs=4, size=32, seed=0)
    return DatasetManifest.from_directory(root, "train")


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory):
    """Three 16x16 pairs, small enough for quick training smoke tests."""
    root = tmp_path_factory.mktemp("small")
    make_toy_dataset(root, "train", n_pairs=3, size=16, seed=5)
    return DatasetManifest.from_directory(root, "train")


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[key])
