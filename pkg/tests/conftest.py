# tests/conftest.py
import os

import numpy as np
import pytest

from distgeo.geometry import CoordinateTable
from distgeo.log import configure_logging


@pytest.fixture(scope="session", autouse=True)
def _logging():
    # keep test output quiet unless DISTGEO_LOG asks otherwise
    configure_logging(os.getenv("DISTGEO_LOG", "WARNING"))


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture()
def planar_points(rng):
    """50 random points in the unit square."""
    return rng.uniform(size=(50, 2))


@pytest.fixture()
def planar_table(planar_points):
    return CoordinateTable.from_array(planar_points)


@pytest.fixture()
def random_rotation():
    def make(theta: float, reflect: bool = False) -> np.ndarray:
        c, s = np.cos(theta), np.sin(theta)
        Q = np.array([[c, -s], [s, c]])
        if reflect:
            Q = Q @ np.diag([1.0, -1.0])
        return Q

    return make


@pytest.fixture(scope="session")
def live_cells():
    # Size of end-to-end slides; override to shorten slow runs locally
    return int(os.getenv("DISTGEO_TEST_CELLS", "2000"))


# --------------- small pipeline config ---------------
def _small_overrides() -> dict:
    """
    Shrunk hyperparameters so the full pipeline runs on a few hundred cells in seconds.
    """
    return {
        "synthetic": {"n_cells": 300, "n_genes": 30, "n_domains": 4},
        "embed": {"h": 10},
        "graph": {"k_z": 15, "tau_j": 0.1},
        "patch": {"n_patch": 120, "min_shared": 20},
        "stitch": {"knn_extract": 10},
        "solver": {"n_landmarks": 32, "iterations": 200},
        "metrics": {"k": 10, "lrmse_ks": [5, 10, 20]},
    }
# -----------------------------------------------------


@pytest.fixture()
def small_config():
    from distgeo.config import PipelineConfig

    return PipelineConfig.model_validate(_small_overrides())


@pytest.fixture()
def small_config_file(tmp_path):
    import orjson

    path = tmp_path / "config.json"
    path.write_bytes(orjson.dumps(_small_overrides()))
    return path
