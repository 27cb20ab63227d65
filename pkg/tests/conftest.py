import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from cmcboot.core import Policy, RewardTable, StateActionSpace, TransitionKernel
from cmcboot.environments import riverswim

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_instance(rng, S, A, gamma=None, sparse=False):
    """Random kernel, policy and rewards; ``sparse`` zeroes some kernel entries."""
    space = StateActionSpace(S, A)
    m = rng.random((S, A, S)) + 1e-3
    if sparse:
        m *= rng.random((S, A, S)) < 0.6
        m[np.arange(S), :, rng.integers(0, S, size=S)] += 0.1
    m /= m.sum(axis=-1, keepdims=True)
    pi = rng.random((S, A)) + 1e-3
    pi /= pi.sum(axis=-1, keepdims=True)
    r = rng.normal(size=(S, A))
    gamma = rng.uniform(0.3, 0.95) if gamma is None else gamma
    return (TransitionKernel(space, m), Policy(space, pi), RewardTable(space, r, gamma))


@st.composite
def instances(draw, max_s=4, max_a=4, sparse=False):
    S = draw(st.integers(1, max_s))
    A = draw(st.integers(1, max_a))
    seed = draw(st.integers(0, 2**32 - 1))
    return random_instance(np.random.default_rng(seed), S, A, sparse=sparse)


@pytest.fixture(scope="session")
def rs():
    return riverswim()


@pytest.fixture(scope="session")
def behavior(rs):
    return Policy.constant(rs.space, [0.2, 0.8])
