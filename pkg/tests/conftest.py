"""Shared fixtures and hypothesis strategies."""

import hypothesis.extra.numpy as npst
import numpy as np
import pytest
from hypothesis import strategies as st

from src.data import sample_dataset
from src.helpers.mdp_families import chain, random_dense
from src.mdp import TabularMdp, TabularPolicy


@st.composite
def probability_vectors(draw, min_size=2, max_size=8, size=None):
    """Strictly positive probability vectors."""
    n = size or draw(st.integers(min_value=min_size, max_value=max_size))
    values = draw(npst.arrays(np.float64, (n,), elements=st.floats(0.01, 100.0)))
    return values / values.sum()


@st.composite
def tabular_mdps(draw, max_states=5, max_actions=3):
    num_states = draw(st.integers(1, max_states))
    num_actions = draw(st.integers(1, max_actions))
    raw = draw(npst.arrays(np.float64, (num_states, num_actions, num_states), elements=st.floats(0.0, 10.0)))
    raw[..., 0] += 1e-3
    reward = draw(npst.arrays(np.float64, (num_states, num_actions), elements=st.floats(0.0, 1.0)))
    discount = draw(st.floats(0.0, 0.95))
    start = draw(npst.arrays(np.float64, (num_states,), elements=st.floats(0.01, 1.0)))
    return TabularMdp(raw / raw.sum(axis=2, keepdims=True), reward, discount, start / start.sum())


@st.composite
def policies_for(draw, num_states, num_actions):
    raw = draw(npst.arrays(np.float64, (num_states, num_actions), elements=st.floats(0.0, 1.0)))
    raw[:, 0] += 1e-3
    return TabularPolicy(raw / raw.sum(axis=1, keepdims=True))


@pytest.fixture
def two_state_mdp():
    """
    Two states, two actions. Action 1 in state 0 moves to state 1, which pays
    reward 1 forever; action 0 stays in state 0 for reward 0.5.
    """
    transition = np.zeros((2, 2, 2))
    transition[0, 0, 0] = 1.0
    transition[0, 1, 1] = 1.0
    transition[1, :, 1] = 1.0
    reward = np.array([[0.5, 0.0], [1.0, 1.0]])
    return TabularMdp(transition, reward, 0.9, np.array([1.0, 0.0]))


@pytest.fixture
def dense_mdp():
    return random_dense(num_states=5, num_actions=3, seed=7, discount=0.9)


@pytest.fixture
def chain_mdp():
    return chain(num_states=5, slip=0.1, discount=0.9)


@pytest.fixture
def uds_pair(dense_mdp):
    """Uniform labeled data and a larger uniform unlabeled pool on dense_mdp."""
    labeled_policy = TabularPolicy(np.full((5, 3), 1.0 / 3.0))
    labeled = sample_dataset(dense_mdp, labeled_policy, 200, seed=1, labeled=True, label="L")
    unlabeled = sample_dataset(dense_mdp, labeled_policy, 2000, seed=2, labeled=False, label="U")
    return labeled, unlabeled
