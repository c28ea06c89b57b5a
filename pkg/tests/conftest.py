import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))

from spoofprobe.datasets import SynthConfig, generate_synthetic  # noqa: E402
from spoofprobe.models import build_model  # noqa: E402
from spoofprobe.sfa import build_generators  # noqa: E402

torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))


@pytest.fixture(scope="session")
def small_data():
    return generate_synthetic(SynthConfig(n_samples=24, seed=7))


@pytest.fixture(scope="session")
def tiny_data():
    """16x16 images for the tiny model used in gradient checks."""
    return generate_synthetic(SynthConfig(n_samples=8, image_size=16, seed=3))


@pytest.fixture
def model():
    return build_model("small-cnn", seed=0).eval()


@pytest.fixture
def gens():
    return build_generators(seed=0).eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
