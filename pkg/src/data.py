"""
Offline datasets and behavior policies of graded quality.

A Dataset is an immutable multiset of transitions (s, a, s', r?, task?) kept
as parallel numpy arrays; an absent reward is stored as NaN and an absent
task id as -1. Behavior policies realize the expert / medium / random tiers
of the data-composition experiments on tabular MDPs.
"""

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from scipy.special import softmax

from src.helpers.errors import DimensionMismatch, EmptyDatasetError, InvalidDistribution
from src.mdp import TabularPolicy, occupancy, optimal_policy, optimal_q

QUALITY_KINDS = ("expert", "medium", "random", "soft_optimal")
CSV_COLUMNS = ["state", "action", "next_state", "reward", "task_id"]
NO_TASK = -1


@dataclass(frozen=True)
class Transition:
    state: int
    action: int
    next_state: int
    reward: Optional[float] = None
    task_id: Optional[int] = None

    @property
    def labeled(self):
        return self.reward is not None


def _readonly(values, dtype):
    array = np.array(values, dtype=dtype, copy=True).reshape(-1)
    array.setflags(write=False)
    return array


class Dataset:
    """
    Ordered multiset of transitions over a fixed state/action space.

    counts_sa[s, a] = |D(s, a)| and counts_s[s] = |D(s)| are computed once at
    construction.
    """

    def __init__(self, num_states, num_actions, states, actions, next_states,
                 rewards=None, task_ids=None, label="", seed=None):
        self.num_states = int(num_states)
        self.num_actions = int(num_actions)
        self.states = _readonly(states, int)
        self.actions = _readonly(actions, int)
        self.next_states = _readonly(next_states, int)
        size = self.states.size
        if rewards is None:
            rewards = np.full(size, np.nan)
        if task_ids is None:
            task_ids = np.full(size, NO_TASK)
        self.rewards = _readonly(rewards, float)
        self.task_ids = _readonly(task_ids, int)
        self.label = label
        self.seed = seed

        for name in ("actions", "next_states", "rewards", "task_ids"):
            if getattr(self, name).size != size:
                raise DimensionMismatch(name, size, getattr(self, name).size)
        if size:
            if self.states.min() < 0 or self.states.max() >= self.num_states:
                raise DimensionMismatch("state index", f"[0, {self.num_states})", (self.states.min(), self.states.max()))
            if self.next_states.min() < 0 or self.next_states.max() >= self.num_states:
                raise DimensionMismatch("next_state index", f"[0, {self.num_states})", (self.next_states.min(), self.next_states.max()))
            if self.actions.min() < 0 or self.actions.max() >= self.num_actions:
                raise DimensionMismatch("action index", f"[0, {self.num_actions})", (self.actions.min(), self.actions.max()))
        present = self.rewards[~np.isnan(self.rewards)]
        if present.size and (present.min() < 0.0 or present.max() > 1.0):
            raise ValueError("reward labels must lie in [0, 1]")

        self.counts_sa = self.pair_counts()
        self.counts_s = self.counts_sa.sum(axis=1)
        self.counts_sa.setflags(write=False)
        self.counts_s.setflags(write=False)

    # ----- construction -----

    @classmethod
    def empty(cls, num_states, num_actions, label=""):
        return cls(num_states, num_actions, [], [], [], label=label)

    @classmethod
    def from_transitions(cls, transitions, num_states, num_actions, label=""):
        transitions = list(transitions)
        return cls(
            num_states,
            num_actions,
            [t.state for t in transitions],
            [t.action for t in transitions],
            [t.next_state for t in transitions],
            rewards=[np.nan if t.reward is None else t.reward for t in transitions],
            task_ids=[NO_TASK if t.task_id is None else t.task_id for t in transitions],
            label=label,
        )

    def _replace(self, **changes):
        fields = dict(
            num_states=self.num_states,
            num_actions=self.num_actions,
            states=self.states,
            actions=self.actions,
            next_states=self.next_states,
            rewards=self.rewards,
            task_ids=self.task_ids,
            label=self.label,
            seed=self.seed,
        )
        fields.update(changes)
        return Dataset(**fields)

    def without_rewards(self):
        """Same transitions with every reward label removed."""
        return self._replace(rewards=np.full(len(self), np.nan))

    def with_task_id(self, task_id):
        return self._replace(task_ids=np.full(len(self), int(task_id)))

    def subset(self, mask):
        mask = np.asarray(mask, dtype=bool)
        return self._replace(
            states=self.states[mask],
            actions=self.actions[mask],
            next_states=self.next_states[mask],
            rewards=self.rewards[mask],
            task_ids=self.task_ids[mask],
        )

    # ----- views -----

    def __len__(self):
        return int(self.states.size)

    def __iter__(self):
        return iter(self.transitions)

    @property
    def transitions(self):
        return [
            Transition(
                int(s), int(a), int(n),
                None if np.isnan(r) else float(r),
                None if t == NO_TASK else int(t),
            )
            for s, a, n, r, t in zip(self.states, self.actions, self.next_states, self.rewards, self.task_ids)
        ]

    @property
    def labeled_mask(self):
        return ~np.isnan(self.rewards)

    def is_labeled(self):
        """True when every transition carries a reward."""
        return bool(self.labeled_mask.all())

    def num_labeled(self):
        return int(self.labeled_mask.sum())

    def _pair_index(self):
        return self.states * self.num_actions + self.actions

    def pair_counts(self, weights=None):
        """(Weighted) counts per (s, a); integer when unweighted."""
        flat = np.bincount(self._pair_index(), weights=weights, minlength=self.num_states * self.num_actions)
        return flat.reshape(self.num_states, self.num_actions).astype(float if weights is not None else int)

    def labeled_counts(self):
        """|D_L(s, a)|: number of labeled transitions at each pair."""
        return self.pair_counts(self.labeled_mask.astype(float)).round().astype(int)

    def reward_sums(self):
        """Sum of observed rewards at each pair (unlabeled transitions contribute nothing)."""
        return self.pair_counts(np.nan_to_num(self.rewards, nan=0.0))

    def transition_counts(self, weights=None):
        """(Weighted) counts n(s, a, s')."""
        flat_index = self._pair_index() * self.num_states + self.next_states
        flat = np.bincount(flat_index, weights=weights, minlength=self.num_states * self.num_actions * self.num_states)
        return flat.reshape(self.num_states, self.num_actions, self.num_states).astype(float)

    def coverage(self):
        """Coverage proxy: min and mean of counts_sa."""
        return {"min_count": int(self.counts_sa.min()), "mean_count": float(self.counts_sa.mean())}

    def same_space(self, other):
        return (self.num_states, self.num_actions) == (other.num_states, other.num_actions)

    # ----- persistence -----

    def to_frame(self):
        frame = pd.DataFrame({
            "state": self.states,
            "action": self.actions,
            "next_state": self.next_states,
            "reward": self.rewards,
            "task_id": pd.array(np.where(self.task_ids == NO_TASK, None, self.task_ids).tolist(), dtype="Int64"),
        })
        return frame[CSV_COLUMNS]

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, na_rep="", float_format="%.17g")

    @classmethod
    def from_frame(cls, frame, num_states, num_actions, label="", seed=None):
        task_ids = frame["task_id"] if "task_id" in frame else pd.Series([np.nan] * len(frame))
        return cls(
            num_states,
            num_actions,
            frame["state"].to_numpy(dtype=int),
            frame["action"].to_numpy(dtype=int),
            frame["next_state"].to_numpy(dtype=int),
            rewards=pd.to_numeric(frame["reward"], errors="coerce").to_numpy(dtype=float),
            task_ids=pd.to_numeric(task_ids, errors="coerce").fillna(NO_TASK).to_numpy(dtype=int),
            label=label,
            seed=seed,
        )

    @classmethod
    def from_csv(cls, path, num_states, num_actions, label="", seed=None):
        return cls.from_frame(pd.read_csv(path), num_states, num_actions, label=label, seed=seed)

    def manifest(self):
        return {
            "label": self.label,
            "seed": self.seed,
            "size": len(self),
            "num_labeled": self.num_labeled(),
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            **self.coverage(),
        }

    def write_manifest(self, path):
        with open(path, "w") as f:
            json.dump(self.manifest(), f, indent=2, sort_keys=True)


@dataclass(frozen=True)
class QualitySpec:
    """
    Behavior-policy quality tier.

    kind: expert | medium | random | soft_optimal
    epsilon: weight on the uniform policy for `medium`
    temperature: softmax temperature for `soft_optimal`
    """

    kind: str = "random"
    epsilon: float = 0.5
    temperature: float = 1.0

    def __post_init__(self):
        if self.kind not in QUALITY_KINDS:
            raise ValueError(f"unknown quality '{self.kind}' ({' | '.join(QUALITY_KINDS)})")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")

    @classmethod
    def from_dict(cls, doc):
        if isinstance(doc, str):
            return cls(kind=doc)
        if isinstance(doc, QualitySpec):
            return doc
        return cls(
            kind=doc.get("kind", "random"),
            epsilon=float(doc.get("epsilon", 0.5)),
            temperature=float(doc.get("temperature", 1.0)),
        )

    def to_dict(self):
        return {"kind": self.kind, "epsilon": self.epsilon, "temperature": self.temperature}

    @property
    def name(self):
        if self.kind == "medium" and self.epsilon != 0.5:
            return f"medium(eps={self.epsilon:g})"
        if self.kind == "soft_optimal":
            return f"soft_optimal(T={self.temperature:g})"
        return self.kind


def behavior_policy(mdp, spec):
    """
    Behavior policy of the requested quality.

    expert        greedy optimal policy, ties to the lowest action index
    random        uniform
    medium        (1 - ε)·expert + ε·uniform
    soft_optimal  softmax(Q*/temperature)
    """
    spec = QualitySpec.from_dict(spec)
    uniform = TabularPolicy.uniform(mdp.num_states, mdp.num_actions)
    if spec.kind == "random":
        return uniform
    if spec.kind == "soft_optimal":
        return TabularPolicy(softmax(optimal_q(mdp) / spec.temperature, axis=1))
    expert = optimal_policy(mdp)
    if spec.kind == "expert":
        return expert
    return TabularPolicy((1.0 - spec.epsilon) * expert.probs + spec.epsilon * uniform.probs)


def _sample_rows(rng, rows):
    """Draw one index per row of a (n, k) table of probabilities (inverse CDF)."""
    cumulative = np.cumsum(rows, axis=1)
    u = rng.random(rows.shape[0]) * cumulative[:, -1]
    return np.minimum((u[:, None] >= cumulative).sum(axis=1), rows.shape[1] - 1)


def _rollout_pairs(mdp, policy, num_transitions, rng):
    states = np.empty(num_transitions, dtype=int)
    state = rng.choice(mdp.num_states, p=mdp.initial_dist)
    for i in range(num_transitions):
        states[i] = state
        action = _sample_rows(rng, policy.probs[state][None, :])[0]
        next_state = _sample_rows(rng, mdp.transition[state, action][None, :])[0]
        # episode ends with probability 1 - γ, which matches the discounted occupancy
        if rng.random() < 1.0 - mdp.discount:
            state = rng.choice(mdp.num_states, p=mdp.initial_dist)
        else:
            state = next_state
    return states


def sample_dataset(mdp, policy, num_transitions, seed, labeled, mode="iid",
                   reward_noise=0.0, label="", task_id=None):
    """
    Sample an offline dataset from a behavior policy.

    Parameters
    ----------
    mdp : TabularMdp
    policy : TabularPolicy
        Behavior policy π_β.
    num_transitions : int
        Number of transitions, >= 1.
    seed : int
        Seed for numpy's default_rng; the same seed gives the same dataset.
    labeled : bool
        Attach reward labels r(s, a) when True.
    mode : str
        "iid": s ~ d^π(s), a ~ π(·|s), s' ~ P(·|s, a) independently per transition.
        "trajectory": s is taken along rollouts from ρ with termination 1 - γ.
    reward_noise : float
        Half-width of uniform label noise (labels truncated to [0, 1]).
    label : str
        Provenance string, e.g. "expert/100".
    task_id : int, optional
        Tag every transition with this task.

    Returns
    -------
    Dataset
    """
    num_transitions = int(num_transitions)
    if num_transitions < 1:
        raise ValueError(f"num_transitions must be >= 1, got {num_transitions}")
    if policy.probs.shape != (mdp.num_states, mdp.num_actions):
        raise DimensionMismatch("policy", (mdp.num_states, mdp.num_actions), policy.probs.shape)

    rng = np.random.default_rng(seed)
    if mode == "iid":
        state_dist = occupancy(mdp, policy).state_marginal
        states = rng.choice(mdp.num_states, size=num_transitions, p=state_dist / state_dist.sum())
    elif mode == "trajectory":
        states = _rollout_pairs(mdp, policy, num_transitions, rng)
    else:
        raise ValueError(f"unknown sampling mode '{mode}' (iid | trajectory)")

    actions = _sample_rows(rng, policy.probs[states])
    next_states = _sample_rows(rng, mdp.transition[states, actions])

    rewards = None
    if labeled:
        rewards = mdp.reward[states, actions].copy()
        if reward_noise > 0:
            rewards = np.clip(rewards + rng.uniform(-reward_noise, reward_noise, size=num_transitions), 0.0, 1.0)

    task_ids = None if task_id is None else np.full(num_transitions, int(task_id))
    return Dataset(
        mdp.num_states,
        mdp.num_actions,
        states,
        actions,
        next_states,
        rewards=rewards,
        task_ids=task_ids,
        label=label,
        seed=seed,
    )


def exhaustive_dataset(mdp, per_pair=1, labeled=True, label="exhaustive"):
    """
    Deterministic dataset holding round(P(s'|s,a)·per_pair) copies of every
    transition, so its empirical MDP reproduces `mdp`.

    Raises:
        InvalidDistribution: some P(s'|s,a) is not a multiple of 1/per_pair.
    """
    scaled = mdp.transition * int(per_pair)
    counts = np.rint(scaled)
    if np.abs(scaled - counts).max() > 1e-9:
        raise InvalidDistribution("transition", f"probabilities are not multiples of 1/{per_pair}")
    s, a, t = np.nonzero(counts)
    repeats = counts[s, a, t].astype(int)
    states = np.repeat(s, repeats)
    actions = np.repeat(a, repeats)
    rewards = mdp.reward[states, actions] if labeled else None
    return Dataset(
        mdp.num_states,
        mdp.num_actions,
        states,
        actions,
        np.repeat(t, repeats),
        rewards=rewards,
        label=label,
    )


def merge(datasets):
    """
    Union of datasets over the same state/action space (concatenation, counts recomputed).

    Raises:
        EmptyDatasetError: no datasets given.
        DimensionMismatch: datasets over different spaces.
    """
    datasets = list(datasets)
    if not datasets:
        raise EmptyDatasetError("merge needs at least one dataset")
    first = datasets[0]
    for other in datasets[1:]:
        if not first.same_space(other):
            raise DimensionMismatch(
                "merge", (first.num_states, first.num_actions), (other.num_states, other.num_actions)
            )
    if len(datasets) == 1:
        return first
    labels = [d.label for d in datasets if d.label and len(d)]
    return Dataset(
        first.num_states,
        first.num_actions,
        np.concatenate([d.states for d in datasets]),
        np.concatenate([d.actions for d in datasets]),
        np.concatenate([d.next_states for d in datasets]),
        rewards=np.concatenate([d.rewards for d in datasets]),
        task_ids=np.concatenate([d.task_ids for d in datasets]),
        label="+".join(labels) if labels else first.label,
    )


def split_by_task(dataset, task_id):
    """
    Split a multi-task pool into (own task, other tasks).

    The other tasks' transitions lose their reward labels, so they play the
    role of the unlabeled pool for `task_id`.
    """
    own = dataset.task_ids == int(task_id)
    return dataset.subset(own), dataset.subset(~own).without_rewards()
