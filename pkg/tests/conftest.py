import json

import numpy as np
import pytest

from navigation.ocp import OcpConfig
from navigation.plant import InitialBelief, NoiseModel, double_integrator
from navigation.terrain import Bump, GaussianFieldMap, PlaneMap
from orchestrator.config import Scenario


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def dyn():
    return double_integrator(10.0)


@pytest.fixture
def noise():
    return NoiseModel.diagonal((1.0, 1.0, 1.0, 0.01, 0.01, 0.01), 4.0)


@pytest.fixture
def belief():
    return InitialBelief.diagonal((0.0, 0.0, 100.0, 0.0, 0.0, 0.0), (1e4, 1e4, 100.0, 1.0, 1.0, 1.0))


@pytest.fixture
def flat():
    return PlaneMap()


@pytest.fixture
def one_bump():
    return GaussianFieldMap(bumps=(Bump(center=(1000.0, 300.0), amplitude=40.0, width=150.0),))


@pytest.fixture
def small_scenario(dyn, noise, belief, one_bump):
    return Scenario(dyn=dyn, terrain=one_bump, noise=noise, belief=belief, n_particles=300)


@pytest.fixture
def small_ocp():
    return OcpConfig(alpha=1.0, beta=50.0, gamma=1e-2, x_ta=np.array([600.0, 0.0, 100.0, 0, 0, 0]), horizon=4, n_s=10)


@pytest.fixture
def tiny_config_dict():
    """A RunConfig small enough for end-to-end runs in a test."""
    return {
        "schema": 1,
        "dt": 10.0,
        "n_particles": 200,
        "runs": 2,
        "seed": 3,
        "ocp": {"alpha": 1.0, "beta": 50.0, "gamma": 0.01, "x_ta": [600.0, 0.0, 100.0, 0.0, 0.0, 0.0],
                "horizon": 3, "n_s": 10},
        "terrain": {"kind": "gaussian_field",
                    "bumps": [{"center": [300.0, 200.0], "amplitude": 40.0, "width": 150.0}]},
    }


@pytest.fixture
def tiny_config_path(tmp_path, tiny_config_dict):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_config_dict))
    return path
