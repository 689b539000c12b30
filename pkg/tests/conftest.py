import os
from pathlib import Path

import numpy as np
import pytest

from fedmil.datasets import SyntheticSpec, generate_synthetic

MNIST_DIR = Path(os.environ.get("FEDMIL_MNIST_DIR", "/root/data/mnist"))


def mnist_available():
    return (MNIST_DIR / "train-labels-idx1-ubyte").exists() or \
        (MNIST_DIR / "train-labels-idx1-ubyte.gz").exists()


@pytest.fixture(scope="session")
def mnist_dir():
    if not mnist_available():
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR} (set FEDMIL_MNIST_DIR)")
    return MNIST_DIR


@pytest.fixture(scope="session")
def small_ds():
    return generate_synthetic(SyntheticSpec(num_bags=120, instances_per_bag=4, feature_dim=5,
                                            num_latent_clusters=3, rng_seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion, printed in the summary."""
    def _report(number, name, passed, detail=""):
        ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {name}"
                                + (f" ({detail})" if detail else ""))
        print(ACCEPTANCE_LINES[-1])
        return passed
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
