import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from config import PhantomConfig
from diffusion import cached_schedule
from phantom import generate_phantom


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end runs through the CLI handlers")


SMALL_PHANTOM = dict(
    n_vertebrae=3,
    body_radius=6.0,
    body_height=8.0,
    disc_gap=4.0,
    process_length=10.0,
    process_width=4.0,
    curvature=0.0,
    noise_sigma=0.0,
    margin=6.0,
)


@pytest.fixture
def small_phantom_config():
    return PhantomConfig(**SMALL_PHANTOM)


@pytest.fixture
def small_phantom(small_phantom_config):
    return generate_phantom(small_phantom_config)


@pytest.fixture
def phantom_overrides():
    """The small phantom as `--set` arguments for the CLI."""
    args = []
    for key, value in SMALL_PHANTOM.items():
        args += ["--set", f"phantom.{key}={value}"]
    return args


@pytest.fixture
def schedule():
    return cached_schedule(1000, 0.008)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
