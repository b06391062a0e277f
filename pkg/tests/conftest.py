from __future__ import annotations

import shutil
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from congestion_harvester import kernels
from congestion_harvester.congestion import default_palette
from congestion_harvester.geo_grid import grid_spec

# exclusion vectors of the Manhattan study grid
NYC_EXCLUDED = [(4, 1), (5, 1), (6, 1), (6, 2), (1, 3), (2, 3)]


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    previous = kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(previous)


@pytest.fixture
def palette():
    return default_palette()


@pytest.fixture
def nyc_spec():
    return grid_spec((40.79, -73.97), 15, 1000, 6, 3, NYC_EXCLUDED)


@pytest.fixture
def small_spec():
    return grid_spec((40.81, -73.92), 15, 64, 2, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def utc_noon():
    return datetime(2020, 6, 1, 12, 0, tzinfo=timezone.utc)


@pytest.fixture
def demo_dir(tmp_path) -> Path:
    """Writable copy of the packaged demo config, scenario and sites."""
    src = resources.files("congestion_harvester").joinpath("data/demo")
    dst = tmp_path / "demo"
    dst.mkdir()
    for name in ("config.json", "scenario.json", "sites.json"):
        shutil.copyfile(src.joinpath(name), dst / name)
    return dst
