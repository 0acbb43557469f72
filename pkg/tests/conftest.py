import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from autopet_lab.phantom import PhantomConfig, generate_phantom  # noqa: E402


@pytest.fixture
def small_config():
    return PhantomConfig(grid_shape=(24, 24, 24), spacing=(2.0, 2.0, 2.0), lesion_count_range=(1, 3),
                         lesion_radius_range_mm=(3.0, 6.0), rng_seed=7)


@pytest.fixture
def phantom(small_config):
    return generate_phantom(small_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_mask(rng, max_side=8, density=None):
    shape = tuple(int(n) for n in rng.integers(1, max_side + 1, size=3))
    p = rng.uniform(0.1, 0.6) if density is None else density
    return (rng.random(shape) < p).astype(np.uint8)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
