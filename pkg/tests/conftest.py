import math
from importlib import resources

import numpy as np
import pytest

from mpqkd import ChannelParams, ProtocolParams, simulate_session
from mpqkd.io import load_config, load_count_table

DATA = resources.files("mpqkd") / "data"
DISTANCES = (101, 202, 304, 407)


def config_path(km):
    return DATA / "configs" / f"km{km}.json"


def counts_path(km):
    return DATA / "counts" / f"km{km}.csv"


@pytest.fixture(scope="session")
def km101():
    return load_config(config_path(101))


@pytest.fixture(scope="session")
def table101():
    return load_count_table(counts_path(101))


@pytest.fixture(scope="session")
def small_session():
    """A few cycles at 101 km with laser drift; shared by the cheaper tests."""
    ch = ChannelParams(total_transmittance=4.32e-2, extinction_db=40,
                       freq_walk_rate=4e11, fiber_phase_rate=1e3, linewidth=2e3)
    return simulate_session(ProtocolParams(), ch, 40, seed=7)


def synthetic_group(seed, f_hz, n=500, p=0.005, tau=1.6e-9):
    """Strong-pulse clicks with a constant frequency offset and random initial phase."""
    from mpqkd.phase import EstimationGroup

    rng = np.random.default_rng(seed)
    gaps = rng.geometric(p, size=n)
    k = np.cumsum(gaps) - gaps[0]
    w = 2 * math.pi * f_hz
    th = rng.uniform(0, 2 * math.pi)
    out = (rng.random(n) < (1 - np.cos(th + w * tau * k)) / 2).astype(np.int8)
    return EstimationGroup(k, out), w
