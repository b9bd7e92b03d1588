"""
Exact tabular MDP toolkit.

Holds the finite MDP / policy / occupancy types and the exact (dense linear
solve) evaluators everything else is built on: returns, Q/V tables, discounted
occupancy measures, greedy optimal policies, empirical MDPs estimated from
datasets, and the D_CQL divergence used throughout the bounds.

All types are immutable after construction: their arrays are copied and
marked read-only, so they can be shared freely across worker processes.
"""

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import rel_entr

from src.helpers.errors import (
    CoverageViolation,
    CoverageWarning,
    DimensionMismatch,
    InvalidDistribution,
    SupportViolation,
)

# Normalization tolerance for stochastic tables
PROB_ATOL = 1e-12
# Two Q-values closer than this (relative) count as a tie; ties go to the lowest action index
TIE_RTOL = 1e-10


def _frozen(values, dtype=float):
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


def _check_simplex_rows(what, table, atol=PROB_ATOL):
    if np.any(table < 0):
        idx = tuple(int(i) for i in np.argwhere(table < 0)[0])
        raise InvalidDistribution(what, f"negative entry at {idx}")
    sums = np.atleast_1d(table.sum(axis=-1))
    bad = np.argwhere(np.abs(sums - 1.0) > atol)
    if bad.size:
        idx = tuple(int(i) for i in bad[0])
        raise InvalidDistribution(what, f"row {idx} sums to {sums[tuple(bad[0])]!r}")


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """
    Finite discounted MDP.

    Parameters
    ----------
    transition : array (S, A, S)
        P(s'|s, a); every (s, a) row sums to 1.
    reward : array (S, A)
        Expected reward r(s, a) in [0, 1].
    discount : float
        γ in [0, 1).
    initial_dist : array (S,)
        Start-state distribution ρ.
    uncovered : tuple of (s, a)
        Pairs filled in by the lenient coverage fallback of an empirical MDP
        (self-loop, zero reward). Empty for every other MDP.
    """

    transition: np.ndarray
    reward: np.ndarray
    discount: float
    initial_dist: np.ndarray
    uncovered: tuple = ()

    def __post_init__(self):
        transition = _frozen(self.transition)
        reward = _frozen(self.reward)
        initial_dist = _frozen(self.initial_dist)
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "initial_dist", initial_dist)
        object.__setattr__(self, "discount", float(self.discount))
        object.__setattr__(self, "uncovered", tuple(tuple(int(i) for i in p) for p in self.uncovered))

        if transition.ndim != 3 or transition.shape[0] != transition.shape[2]:
            raise DimensionMismatch("transition", "(S, A, S)", transition.shape)
        num_states, num_actions = transition.shape[:2]
        if num_states < 1 or num_actions < 1:
            raise DimensionMismatch("transition", "S >= 1 and A >= 1", transition.shape)
        if reward.shape != (num_states, num_actions):
            raise DimensionMismatch("reward", (num_states, num_actions), reward.shape)
        if initial_dist.shape != (num_states,):
            raise DimensionMismatch("initial_dist", (num_states,), initial_dist.shape)
        if not 0.0 <= self.discount < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")

        _check_simplex_rows("transition", transition)
        _check_simplex_rows("initial_dist", initial_dist)
        if np.any(reward < 0.0) or np.any(reward > 1.0) or not np.all(np.isfinite(reward)):
            raise ValueError("reward entries must lie in [0, 1]")

    @property
    def num_states(self):
        return self.transition.shape[0]

    @property
    def num_actions(self):
        return self.transition.shape[1]

    @property
    def horizon(self):
        """Effective horizon H = 1/(1-γ)."""
        return 1.0 / (1.0 - self.discount)

    def with_reward(self, reward):
        """Copy of this MDP with a different reward table."""
        return TabularMdp(self.transition, reward, self.discount, self.initial_dist, self.uncovered)

    def to_dict(self):
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "transition": self.transition.ravel().tolist(),
            "reward": self.reward.tolist(),
            "discount": self.discount,
            "initial_dist": self.initial_dist.tolist(),
        }

    def to_json(self, indent=None):
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, doc):
        num_states = int(doc["num_states"])
        num_actions = int(doc["num_actions"])
        transition = np.asarray(doc["transition"], dtype=float)
        expected = num_states * num_actions * num_states
        if transition.size != expected:
            raise DimensionMismatch("transition", expected, transition.size)
        return cls(
            transition=transition.reshape(num_states, num_actions, num_states),
            reward=np.asarray(doc["reward"], dtype=float).reshape(num_states, num_actions),
            discount=float(doc["discount"]),
            initial_dist=np.asarray(doc["initial_dist"], dtype=float),
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    """Stochastic policy π(a|s) stored as an (S, A) row-stochastic matrix."""

    probs: np.ndarray

    def __post_init__(self):
        probs = _frozen(self.probs)
        object.__setattr__(self, "probs", probs)
        if probs.ndim != 2 or min(probs.shape) < 1:
            raise DimensionMismatch("policy", "(S, A)", probs.shape)
        _check_simplex_rows("policy", probs)

    @property
    def num_states(self):
        return self.probs.shape[0]

    @property
    def num_actions(self):
        return self.probs.shape[1]

    @classmethod
    def uniform(cls, num_states, num_actions):
        return cls(np.full((num_states, num_actions), 1.0 / num_actions))

    @classmethod
    def deterministic(cls, actions, num_actions):
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((actions.size, num_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs)

    def total_variation(self, other):
        """Per-state total-variation distance to another policy."""
        return 0.5 * np.abs(self.probs - other.probs).sum(axis=1)


@dataclass(frozen=True, eq=False)
class OccupancyMeasure:
    """Normalized discounted state-action visitation d^π(s, a); sums to 1."""

    density: np.ndarray

    def __post_init__(self):
        density = _frozen(self.density)
        object.__setattr__(self, "density", density)
        if density.ndim != 2:
            raise DimensionMismatch("occupancy", "(S, A)", density.shape)
        if np.any(density < 0):
            raise InvalidDistribution("occupancy", "negative entry")
        if abs(density.sum() - 1.0) > 1e-9:
            raise InvalidDistribution("occupancy", f"sums to {density.sum()!r}")

    @property
    def state_marginal(self):
        return self.density.sum(axis=1)

    @classmethod
    def from_counts(cls, counts):
        """Empirical state-action distribution of a count table (e.g. d_L)."""
        counts = np.asarray(counts, dtype=float)
        total = counts.sum()
        if total <= 0:
            raise InvalidDistribution("occupancy", "count table is empty")
        return cls(counts / total)


def _check_pair(mdp, policy):
    if policy.probs.shape != (mdp.num_states, mdp.num_actions):
        raise DimensionMismatch("policy", (mdp.num_states, mdp.num_actions), policy.probs.shape)


def _reward_table(mdp, reward):
    if reward is None:
        return mdp.reward
    reward = np.asarray(reward, dtype=float)
    if reward.shape != (mdp.num_states, mdp.num_actions):
        raise DimensionMismatch("reward", (mdp.num_states, mdp.num_actions), reward.shape)
    return reward


def policy_transition(mdp, policy):
    """State-to-state kernel P^π(s'|s) = Σ_a π(a|s) P(s'|s, a)."""
    _check_pair(mdp, policy)
    return np.einsum("sa,sat->st", policy.probs, mdp.transition)


def state_values(mdp, policy, reward=None, state_reward=None):
    """
    Exact V^π by solving (I - γ P^π) V = r^π.

    `reward` replaces the MDP's reward table; `state_reward` (shape (S,))
    replaces the policy-averaged reward r^π altogether, which is how
    regularized objectives are evaluated.
    """
    p_pi = policy_transition(mdp, policy)
    if state_reward is None:
        r_pi = np.sum(policy.probs * _reward_table(mdp, reward), axis=1)
    else:
        r_pi = np.asarray(state_reward, dtype=float)
        if r_pi.shape != (mdp.num_states,):
            raise DimensionMismatch("state_reward", (mdp.num_states,), r_pi.shape)
    system = np.eye(mdp.num_states) - mdp.discount * p_pi
    return np.linalg.solve(system, r_pi)


def q_values(mdp, policy, reward=None, values=None):
    """Exact Q^π(s, a) = r(s, a) + γ Σ_s' P(s'|s, a) V^π(s')."""
    reward = _reward_table(mdp, reward)
    if values is None:
        values = state_values(mdp, policy, reward)
    return reward + mdp.discount * np.einsum("sat,t->sa", mdp.transition, values)


def evaluate_return(mdp, policy, reward=None):
    """
    Expected discounted return J(π) = ρ · V^π.

    Args:
        mdp (TabularMdp): The MDP.
        policy (TabularPolicy): Policy to evaluate.
        reward (array, optional): Reward table overriding mdp.reward.

    Returns:
        float: J(π) = E[Σ_t γ^t r(s_t, a_t)].
    """
    return float(mdp.initial_dist @ state_values(mdp, policy, reward))


def occupancy(mdp, policy):
    """
    Normalized discounted occupancy d^π.

    Solves the flow equations d_s = (1-γ)ρ + γ (P^π)^T d_s and spreads the
    state marginal over actions with π, so that J(π) = <d^π, r>/(1-γ).
    """
    p_pi = policy_transition(mdp, policy)
    system = (np.eye(mdp.num_states) - mdp.discount * p_pi).T
    d_states = (1.0 - mdp.discount) * np.linalg.solve(system, mdp.initial_dist)
    density = np.clip(d_states[:, None] * policy.probs, 0.0, None)
    return OccupancyMeasure(density / density.sum())


def return_from_occupancy(occ, reward, discount):
    """J = <d, r>/(1-γ)."""
    return float(np.sum(occ.density * np.asarray(reward, dtype=float)) / (1.0 - discount))


def greedy_actions(q, rtol=TIE_RTOL):
    """Row-wise argmax with near-ties broken toward the lowest action index."""
    best = q.max(axis=1, keepdims=True)
    near_best = q >= best - rtol * np.maximum(1.0, np.abs(best))
    return near_best.argmax(axis=1)


def _policy_iteration(mdp, max_iters=10_000):
    num_states = mdp.num_states
    rows = np.arange(num_states)
    actions = np.zeros(num_states, dtype=int)
    for _ in range(max_iters):
        q = q_values(mdp, TabularPolicy.deterministic(actions, mdp.num_actions))
        best = q.max(axis=1)
        current = q[rows, actions]
        # switch only on strict improvement so the loop cannot cycle between tied actions
        improvable = best > current + TIE_RTOL * np.maximum(1.0, np.abs(best))
        if not improvable.any():
            break
        actions = np.where(improvable, greedy_actions(q), actions)
    final = greedy_actions(q)
    return TabularPolicy.deterministic(final, mdp.num_actions), q


def optimal_policy(mdp):
    """Greedy optimal policy via exact policy iteration; ties go to the lowest action index."""
    return _policy_iteration(mdp)[0]


def optimal_q(mdp):
    """Optimal action values Q*."""
    return _policy_iteration(mdp)[1]


def mdp_from_counts(transition_counts, reward, discount, initial_dist, strict=True):
    """
    Build an MDP from (possibly weighted) transition counts.

    P̂(s'|s,a) = n(s,a,s')/n(s,a). In strict mode every pair needs n(s,a) > 0;
    in lenient mode uncovered pairs become zero-reward self-loops and are
    listed in `TabularMdp.uncovered`.
    """
    transition_counts = np.asarray(transition_counts, dtype=float)
    reward = np.array(reward, dtype=float, copy=True)
    num_states, num_actions = transition_counts.shape[:2]
    if reward.shape != (num_states, num_actions):
        raise DimensionMismatch("reward", (num_states, num_actions), reward.shape)

    counts_sa = transition_counts.sum(axis=2)
    covered = counts_sa > 0
    missing = [(int(s), int(a)) for s, a in np.argwhere(~covered)]
    if missing and strict:
        raise CoverageViolation(missing)

    transition = np.zeros_like(transition_counts)
    transition[covered] = transition_counts[covered] / counts_sa[covered][:, None]
    for s, a in missing:
        transition[s, a, s] = 1.0
        reward[s, a] = 0.0
    if missing:
        preview = ", ".join(str(pair) for pair in missing[:10])
        more = "" if len(missing) <= 10 else f" (+{len(missing) - 10} more)"
        warnings.warn(
            f"{len(missing)} uncovered (s, a) pairs replaced by zero-reward self-loops: {preview}{more}",
            CoverageWarning,
            stacklevel=2,
        )
    return TabularMdp(transition, np.clip(reward, 0.0, 1.0), discount, initial_dist, uncovered=missing)


def empirical_mdp(dataset, num_states, num_actions, discount, initial_dist, strict=True):
    """
    Empirical MDP induced by a dataset.

    P̂(s'|s,a) = count(s,a,s')/count(s,a); r̂(s,a) is the mean observed reward
    at (s,a). Pairs that were visited but never labeled get r̂ = 0.

    Raises:
        DimensionMismatch: dataset built for another state/action space.
        CoverageViolation: strict mode and some pair has no transitions.
    """
    if (dataset.num_states, dataset.num_actions) != (num_states, num_actions):
        raise DimensionMismatch("dataset", (num_states, num_actions), (dataset.num_states, dataset.num_actions))
    labeled = dataset.labeled_counts()
    reward = np.divide(dataset.reward_sums(), labeled, out=np.zeros((num_states, num_actions)), where=labeled > 0)
    return mdp_from_counts(dataset.transition_counts(), reward, discount, initial_dist, strict=strict)


def d_cql(p, q):
    """
    D_CQL(p, q) = Σ_x p(x) (p(x)/q(x) - 1).

    Nonnegative, and zero exactly when p = q.

    Raises:
        SupportViolation: p(x) > 0 where q(x) = 0.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise DimensionMismatch("d_cql", p.shape, q.shape)
    bad = np.flatnonzero((p > 0) & (q <= 0))
    if bad.size:
        raise SupportViolation(int(bad[0]), f"p has mass at index {int(bad[0])} where q is zero")
    mask = p > 0
    return float(np.sum(p[mask] * (p[mask] / q[mask] - 1.0)))


def policy_divergence(policy, behavior, kind="cql"):
    """
    Per-state divergence D(π, π_β)(s), +inf where π leaves the support of π_β.

    kind="cql" gives Σ_a π(π/π_β - 1); kind="kl" gives Σ_a π log(π/π_β).
    """
    pi = policy.probs
    beta = behavior.probs
    if pi.shape != beta.shape:
        raise DimensionMismatch("behavior", pi.shape, beta.shape)
    violation = ((pi > 0) & (beta <= 0)).any(axis=1)
    if kind == "cql":
        ratio = np.divide(pi, beta, out=np.zeros_like(pi), where=beta > 0)
        per_state = np.where(pi > 0, pi * (ratio - 1.0), 0.0).sum(axis=1)
    elif kind == "kl":
        per_state = np.where(beta > 0, rel_entr(pi, np.where(beta > 0, beta, 1.0)), 0.0).sum(axis=1)
    else:
        raise ValueError(f"unknown divergence '{kind}'")
    return np.where(violation, np.inf, per_state)
