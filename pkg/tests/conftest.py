from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from synprune.data import NO_AUGMENT, Dataset
from synprune.layers import Network, desknet_spec

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = ROOT / "data" / "mnist"
CONFIG_DIR = ROOT / "configs"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    return desknet_spec(in_channels=1, num_classes=10, width=4, first_stride=1)


@pytest.fixture
def small_net(small_spec):
    return Network(small_spec, "synaptic", seed=3, dtype=np.float64)


def blob_dataset(n=64, side=8, seed=0, classes=2) -> Dataset:
    """Linearly separable images: class c lights up quadrant c."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % classes
    x = rng.normal(0.0, 0.3, size=(n, 1, side, side))
    h = side // 2
    for c in range(classes):
        r, q = divmod(c, 2)
        x[y == c, 0, r * h:(r + 1) * h, q * h:(q + 1) * h] += 2.0
    x = x.astype(np.float32)
    return Dataset(x, y, x.copy(), y.copy(), np.zeros(1), np.ones(1), NO_AUGMENT, "blobs", classes)


@pytest.fixture
def blobs():
    return blob_dataset()


# one line per acceptance criterion, printed after the test summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
