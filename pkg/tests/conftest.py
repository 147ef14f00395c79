import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from agentsim.engine import registry
from agentsim.engine.store import AgentRecord, AgentStore, BehaviorInstance

settings.register_profile("ci", max_examples=40, deadline=None, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")

SEEDS = (1, 2, 3)


def make_store(n, kind=registry.CELL.tag, keys=None, positions=None):
    s = AgentStore()
    beh = (BehaviorInstance(registry.GROW_DIVIDE.tag, (1.0,)),)
    s.append_columns({
        "position": np.zeros((n, 3)) if positions is None else positions,
        "diameter": np.ones(n),
        "kind": np.full(n, kind, dtype=np.int32),
        "rng_key": np.arange(n, dtype=np.uint64) if keys is None else keys,
    }, [beh] * n)
    return s


def cell(x=0.0, y=0.0, z=0.0, d=10.0, key=0, behaviors=()):
    return AgentRecord(position=(x, y, z), diameter=d, kind_tag=registry.CELL.tag, behaviors=list(behaviors),
                       rng_key=key)


@pytest.fixture
def store10():
    return make_store(10)
