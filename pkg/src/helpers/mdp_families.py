"""
Benchmark MDP families for the sweep harness.

gridworld     slippery navigation to an absorbing goal (default family; its
              narrow vs broad coverage gives the data-composition scenarios meaning)
random_dense  Dirichlet transitions and uniform rewards (theorem Monte-Carlo runs)
chain         slippery chain with a distractor reward (horizon studies)
"""

import numpy as np

from src.helpers.errors import ConfigError
from src.mdp import TabularMdp

# Gridworld moves: up, right, down, left
MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))
LEFT, RIGHT = 0, 1


def gridworld(size=5, slip=0.1, discount=0.9, distractor_reward=0.0):
    """
    Square gridworld with four moves.

    The intended move succeeds with probability 1 - slip; otherwise one of the
    other three moves happens uniformly at random. Moves into a wall leave the
    agent in place. The bottom-right cell is an absorbing goal paying reward 1
    for every action; the agent starts in the top-left cell. A nonzero
    `distractor_reward` is paid in the bottom-left cell.
    """
    if size < 2:
        raise ConfigError(f"gridworld size must be >= 2, got {size}")
    num_states = size * size
    goal = num_states - 1
    transition = np.zeros((num_states, len(MOVES), num_states))
    reward = np.zeros((num_states, len(MOVES)))

    for state in range(num_states):
        row, col = divmod(state, size)
        if state == goal:
            transition[state, :, state] = 1.0
            reward[state, :] = 1.0
            continue
        for action in range(len(MOVES)):
            for move, (dr, dc) in enumerate(MOVES):
                prob = 1.0 - slip if move == action else slip / (len(MOVES) - 1)
                next_row = min(max(row + dr, 0), size - 1)
                next_col = min(max(col + dc, 0), size - 1)
                transition[state, action, next_row * size + next_col] += prob

    if distractor_reward > 0:
        reward[(size - 1) * size, :] = distractor_reward

    initial_dist = np.zeros(num_states)
    initial_dist[0] = 1.0
    return TabularMdp(transition, reward, discount, initial_dist)


def random_dense(num_states=6, num_actions=3, seed=0, discount=0.9, concentration=1.0):
    """Dense random MDP: Dirichlet(concentration) next-state rows, U[0,1] rewards, uniform start."""
    rng = np.random.default_rng(seed)
    transition = rng.dirichlet(np.full(num_states, concentration), size=(num_states, num_actions))
    transition /= transition.sum(axis=2, keepdims=True)
    reward = rng.uniform(0.0, 1.0, size=(num_states, num_actions))
    initial_dist = np.full(num_states, 1.0 / num_states)
    return TabularMdp(transition, reward, discount, initial_dist)


def chain(num_states=6, slip=0.1, discount=0.9, left_reward=0.1):
    """
    Slippery chain with actions LEFT/RIGHT.

    With probability `slip` the chosen direction is flipped; the ends clamp.
    LEFT in state 0 pays `left_reward`, RIGHT in the last state pays 1.
    Episodes start in state 0.
    """
    if num_states < 2:
        raise ConfigError(f"chain needs at least 2 states, got {num_states}")
    transition = np.zeros((num_states, 2, num_states))
    for state in range(num_states):
        left = max(state - 1, 0)
        right = min(state + 1, num_states - 1)
        transition[state, LEFT, left] += 1.0 - slip
        transition[state, LEFT, right] += slip
        transition[state, RIGHT, right] += 1.0 - slip
        transition[state, RIGHT, left] += slip
    reward = np.zeros((num_states, 2))
    reward[0, LEFT] = left_reward
    reward[num_states - 1, RIGHT] = 1.0
    initial_dist = np.zeros(num_states)
    initial_dist[0] = 1.0
    return TabularMdp(transition, reward, discount, initial_dist)


def build_mdp(mdp_spec, seed=0):
    """
    Build an MDP from the `mdp` section of an experiment config.

    Only random_dense uses the seed (offset by the section's own `seed`);
    gridworld and chain layouts are fixed.
    """
    mdp_spec = mdp_spec or {}
    family = mdp_spec.get("family", "gridworld")
    discount = float(mdp_spec.get("discount", 0.9))

    if family == "gridworld":
        return gridworld(
            size=int(mdp_spec.get("size", 5)),
            slip=float(mdp_spec.get("slip", 0.1)),
            discount=discount,
            distractor_reward=float(mdp_spec.get("distractor_reward", 0.0)),
        )
    if family == "random_dense":
        return random_dense(
            num_states=int(mdp_spec.get("size", 6)),
            num_actions=int(mdp_spec.get("num_actions", 3)),
            seed=int(mdp_spec.get("seed", 0)) + int(seed),
            discount=discount,
            concentration=float(mdp_spec.get("concentration", 1.0)),
        )
    if family == "chain":
        return chain(
            num_states=int(mdp_spec.get("size", 6)),
            slip=float(mdp_spec.get("slip", 0.1)),
            discount=discount,
            left_reward=float(mdp_spec.get("left_reward", 0.1)),
        )
    raise ConfigError(f"unknown MDP family '{family}' (gridworld | random_dense | chain)")
