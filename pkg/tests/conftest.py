import numpy as np
import pytest

from gridmarket import DemandProfile, FeederModel, run_market
from gridmarket.scenarios import ieee37_feeder, ieee37_scenario


@pytest.fixture
def two_node():
    return FeederModel.build([(0, 1, 0.1, 0.1)], v0=1.0, l_max=4.0,
                             base_mva=1.0, base_kv=4.16)


@pytest.fixture
def path3():
    return FeederModel.build([(0, 1, 0.1, 0.1), (1, 2, 0.1, 0.1)], v0=1.0,
                             l_max=4.0, base_mva=1.0, base_kv=4.16)


@pytest.fixture
def star3():
    return FeederModel.build([(0, 1, 0.1, 0.08), (0, 2, 0.12, 0.1), (0, 3, 0.09, 0.11)],
                             v0=1.0, l_max=4.0, base_mva=1.0, base_kv=4.16)


@pytest.fixture(scope="session")
def ieee37():
    return ieee37_feeder()


@pytest.fixture(scope="session")
def det_nodal_outcome():
    return run_market(ieee37_scenario(nodal_pricing=True))


@pytest.fixture(scope="session")
def det_feeder_outcome():
    return run_market(ieee37_scenario(nodal_pricing=False))


@pytest.fixture(scope="session")
def robust_nodal_outcome():
    return run_market(ieee37_scenario(nodal_pricing=True, robust=True))


def zero_demand(n: int) -> DemandProfile:
    z = np.zeros(n)
    return DemandProfile(z.copy(), z.copy(), z.copy(), z.copy())
