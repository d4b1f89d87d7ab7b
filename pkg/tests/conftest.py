import numpy as np
import pytest

import mra
from commands.command_factory import CommandFactory


@pytest.fixture
def out_root(tmp_path, monkeypatch):
    """Point the default output root at a temporary directory."""
    monkeypatch.setenv("ORBIT_MOMENTS_OUT", str(tmp_path / "runs"))
    return tmp_path / "runs"


@pytest.fixture
def small_signal():
    n = 7
    p = np.arange(n) - n // 2
    values = np.exp(-0.5 * (p / 1.2) ** 2) - 0.3 * np.exp(-0.5 * ((p - 2) / 0.8) ** 2)
    return mra.MraSignal(values)


@pytest.fixture
def small_density():
    n = 7
    weights = 1.0 + np.arange(n, dtype=float)
    return mra.MraDensity(weights / weights.sum())


@pytest.fixture
def factory():
    CommandFactory.reset()
    CommandFactory.auto_discover()
    yield CommandFactory
    CommandFactory.reset()
    CommandFactory.auto_discover()
