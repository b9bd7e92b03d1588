"""
Data-sharing and labeling strategies.

Every strategy turns a labeled dataset D_L and an unlabeled pool D_U into an
EffectiveDataset: the merged transitions with a per-transition weight and an
assigned reward, plus the derived tables the solver and the bounds consume
(labeled fraction f, effective reward r̂^eff, effective behavior π_β^eff).

Strategies
----------
no_sharing        D_L alone
sharing_all       D_U relabeled with the true reward (oracle baseline)
uds               D_U relabeled with reward 0
reward_predictor  D_U relabeled with a tabular reward model fit on D_L
cds_filter        oracle rewards, shared data kept by the conservative-Q percentile rule
cds_soft          oracle rewards, shared data weighted by σ(Δ/τ)
cds_uds           reward 0, shared data filtered (or weighted) by the conservative-Q rule
optimal_reweight  reward 0, shared data down-weighted toward the reweighting optimum p*
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from src.data import Dataset, merge
from src.helpers.errors import (
    ConfigError,
    DimensionMismatch,
    EmptyDatasetError,
    InvalidDistribution,
    LabelViolation,
    MissingContext,
)
from src.helpers.simplex import minimize_on_simplex
from src.mdp import OccupancyMeasure, TabularPolicy, mdp_from_counts

STRATEGY_KINDS = (
    "no_sharing",
    "sharing_all",
    "uds",
    "reward_predictor",
    "cds_filter",
    "cds_soft",
    "cds_uds",
    "optimal_reweight",
)
WEIGHT_MODES = ("hard", "soft")
# Relative slack under which a conservative Q-value equals the CDS threshold
TIE_RTOL = 1e-9


@dataclass(frozen=True)
class StrategySpec:
    """
    Sharing strategy and its knobs.

    k_percentile: CDS threshold percentile of the reference conservative Q-values
    temperature_decay: decay of the running |Δ| average that sets τ
    temperature_clip: [min, max] bounds on τ
    predictor_smoothing: pseudo-count toward the global labeled mean
    weight_mode: hard | soft CDS weights for cds_uds
    batch_size: transitions per τ update in soft mode
    restarts: random restarts for optimal_reweight
    name: label used in records and tables (defaults to kind)
    """

    kind: str = "uds"
    k_percentile: float = 50.0
    temperature_decay: float = 0.995
    temperature_clip: tuple = (1.0, math.inf)
    predictor_smoothing: float = 1.0
    weight_mode: str = "hard"
    batch_size: int = 256
    restarts: int = 10
    name: str = ""

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown strategy '{self.kind}' ({' | '.join(STRATEGY_KINDS)})")
        if not 0.0 <= self.k_percentile <= 100.0:
            raise ConfigError(f"k_percentile must lie in [0, 100], got {self.k_percentile}")
        if not 0.0 < self.temperature_decay <= 1.0:
            raise ConfigError(f"temperature_decay must lie in (0, 1], got {self.temperature_decay}")
        lo, hi = (float(v) for v in self.temperature_clip)
        if not 0.0 < lo <= hi:
            raise ConfigError(f"temperature_clip must satisfy 0 < min <= max, got {self.temperature_clip}")
        object.__setattr__(self, "temperature_clip", (lo, hi))
        if self.predictor_smoothing < 0:
            raise ConfigError("predictor_smoothing must be nonnegative")
        if self.weight_mode not in WEIGHT_MODES:
            raise ConfigError(f"unknown weight_mode '{self.weight_mode}' (hard | soft)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @classmethod
    def from_dict(cls, doc):
        if isinstance(doc, str):
            return cls(kind=doc)
        if isinstance(doc, StrategySpec):
            return doc
        clip = doc.get("temperature_clip", [1.0, None])
        return cls(
            kind=doc.get("kind", "uds"),
            k_percentile=float(doc.get("k_percentile", 50.0)),
            temperature_decay=float(doc.get("temperature_decay", 0.995)),
            temperature_clip=(float(clip[0]), math.inf if clip[1] is None else float(clip[1])),
            predictor_smoothing=float(doc.get("predictor_smoothing", 1.0)),
            weight_mode=doc.get("weight_mode", "hard"),
            batch_size=int(doc.get("batch_size", 256)),
            restarts=int(doc.get("restarts", 10)),
            name=str(doc.get("name", "")),
        )

    def to_dict(self):
        lo, hi = self.temperature_clip
        return {
            "kind": self.kind,
            "k_percentile": self.k_percentile,
            "temperature_decay": self.temperature_decay,
            "temperature_clip": [lo, None if math.isinf(hi) else hi],
            "predictor_smoothing": self.predictor_smoothing,
            "weight_mode": self.weight_mode,
            "batch_size": self.batch_size,
            "restarts": self.restarts,
            "name": self.name,
        }

    @property
    def label(self):
        return self.name or self.kind

    @property
    def needs_conservative_q(self):
        return self.kind in ("cds_filter", "cds_soft", "cds_uds")


@dataclass
class StrategyContext:
    """
    What a strategy may need beyond the two datasets.

    oracle: true MDP (sharing_all, cds_filter, cds_soft)
    conservative_q: conservative Q table of the labeled-only solve (CDS kinds)
    predictor: reward table r̂_φ (reward_predictor; fit on D_L when absent)
    policy_occupancy: d̂^π of the policy to reweight for (optimal_reweight)
    reweight_constants: (C1, C2) of the reweighting objective (optimal_reweight)
    seed: restart seed for optimal_reweight
    """

    oracle: Optional[object] = None
    conservative_q: Optional[np.ndarray] = None
    predictor: Optional[np.ndarray] = None
    policy_occupancy: Optional[object] = None
    reweight_constants: Optional[tuple] = None
    seed: int = 0


class EffectiveDataset:
    """
    Merged labeled + shared transitions with weights and assigned rewards.

    `dataset` keeps the original transitions (shared ones unlabeled), labeled
    transitions first. Weighted counts replace integer counts everywhere, so
    with soft weights |D^eff(s, a)| is a real number.
    """

    def __init__(self, labeled, shared, shared_rewards, shared_weights=None, strategy=""):
        if not labeled.same_space(shared):
            raise DimensionMismatch(
                "shared dataset", (labeled.num_states, labeled.num_actions), (shared.num_states, shared.num_actions)
            )
        shared_rewards = np.asarray(shared_rewards, dtype=float).reshape(-1)
        if shared_weights is None:
            shared_weights = np.ones(len(shared))
        shared_weights = np.asarray(shared_weights, dtype=float).reshape(-1)
        for name, values in (("shared_rewards", shared_rewards), ("shared_weights", shared_weights)):
            if values.size != len(shared):
                raise DimensionMismatch(name, len(shared), values.size)
        if np.any(shared_weights < 0) or np.any(shared_weights > 1):
            raise ValueError("weights must lie in [0, 1]")
        if np.any(shared_rewards < 0) or np.any(shared_rewards > 1):
            raise ValueError("assigned rewards must lie in [0, 1]")

        self.strategy = strategy
        self.predictor = None
        self.reweight = None
        self.labeled = labeled
        self.dataset = merge([labeled, shared]) if len(shared) else labeled
        self.num_states = labeled.num_states
        self.num_actions = labeled.num_actions
        self.shared_mask = np.concatenate([np.zeros(len(labeled), bool), np.ones(len(shared), bool)])
        self.weights = np.concatenate([np.ones(len(labeled)), shared_weights])
        self.assigned_rewards = np.concatenate([np.nan_to_num(labeled.rewards, nan=0.0), shared_rewards])
        for array in (self.shared_mask, self.weights, self.assigned_rewards):
            array.setflags(write=False)

        self.counts_eff = self.dataset.pair_counts(self.weights)
        self.labeled_counts = labeled.counts_sa.astype(float)
        covered = self.counts_eff > 0
        self.f_table = np.ones_like(self.counts_eff)
        np.divide(self.labeled_counts, self.counts_eff, out=self.f_table, where=covered)
        np.clip(self.f_table, 0.0, 1.0, out=self.f_table)
        self.r_eff_table = np.zeros_like(self.counts_eff)
        np.divide(self.dataset.pair_counts(self.weights * self.assigned_rewards), self.counts_eff,
                  out=self.r_eff_table, where=covered)
        np.clip(self.r_eff_table, 0.0, 1.0, out=self.r_eff_table)

        state_counts = self.counts_eff.sum(axis=1, keepdims=True)
        probs = np.full_like(self.counts_eff, 1.0 / self.num_actions)
        np.divide(self.counts_eff, state_counts, out=probs, where=state_counts > 0)
        self.behavior = TabularPolicy(probs / probs.sum(axis=1, keepdims=True))

    def __len__(self):
        return len(self.dataset)

    @property
    def size(self):
        """|D^eff|: total weight."""
        return float(self.weights.sum())

    @property
    def labeled_size(self):
        return len(self.labeled)

    @property
    def state_counts(self):
        """|D^eff(s)|."""
        return self.counts_eff.sum(axis=1)

    @property
    def shared_weights(self):
        return self.weights[self.shared_mask]

    def transition_counts(self):
        return self.dataset.transition_counts(self.weights)

    def empirical_mdp(self, discount, initial_dist, strict=True):
        """Empirical MDP of the weighted transitions with reward r̂^eff."""
        return mdp_from_counts(self.transition_counts(), self.r_eff_table, discount, initial_dist, strict=strict)

    def to_frame(self):
        frame = self.dataset.to_frame()
        frame["weight"] = self.weights
        frame["assigned_reward"] = self.assigned_rewards
        return frame

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, na_rep="", float_format="%.17g")


def _check_inputs(labeled, unlabeled, strict=True):
    if not labeled.same_space(unlabeled):
        raise DimensionMismatch(
            "unlabeled", (labeled.num_states, labeled.num_actions), (unlabeled.num_states, unlabeled.num_actions)
        )
    missing = len(labeled) - labeled.num_labeled()
    if missing:
        raise LabelViolation(labeled.label, missing, expected_labeled=True)
    present = unlabeled.num_labeled()
    if present:
        if strict:
            raise LabelViolation(unlabeled.label, present, expected_labeled=False)
        unlabeled = unlabeled.without_rewards()
    return unlabeled


def apply_no_sharing(labeled, unlabeled=None):
    empty = Dataset.empty(labeled.num_states, labeled.num_actions)
    return EffectiveDataset(labeled, empty, [], strategy="no_sharing")


def apply_uds(labeled, unlabeled, strict=True):
    """Share every unlabeled transition with reward 0 and weight 1."""
    unlabeled = _check_inputs(labeled, unlabeled, strict)
    return EffectiveDataset(labeled, unlabeled, np.zeros(len(unlabeled)), strategy="uds")


def apply_sharing_all(labeled, unlabeled, oracle, strict=True):
    """Share every unlabeled transition labeled with the oracle's true r(s, a)."""
    unlabeled = _check_inputs(labeled, unlabeled, strict)
    rewards = oracle.reward[unlabeled.states, unlabeled.actions]
    return EffectiveDataset(labeled, unlabeled, rewards, strategy="sharing_all")


def fit_reward_predictor(labeled, smoothing=1.0):
    """
    Tabular reward model r̂_φ.

    r̂_φ(s, a) = (Σ observed rewards + smoothing·prior) / (count + smoothing)
    with prior the global mean labeled reward; never-labeled pairs get the
    prior. Clipped to [0, 1].
    """
    counts = labeled.labeled_counts().astype(float)
    if counts.sum() == 0:
        raise EmptyDatasetError("reward predictor needs at least one labeled transition")
    sums = labeled.reward_sums()
    prior = sums.sum() / counts.sum()
    table = np.full_like(counts, prior)
    denominator = counts + smoothing
    np.divide(sums + smoothing * prior, denominator, out=table, where=denominator > 0)
    return np.clip(table, 0.0, 1.0)


def apply_reward_predictor(labeled, unlabeled, predictor, strict=True):
    """Share every unlabeled transition labeled with the predicted reward."""
    unlabeled = _check_inputs(labeled, unlabeled, strict)
    predictor = np.asarray(predictor, dtype=float)
    if predictor.shape != (labeled.num_states, labeled.num_actions):
        raise DimensionMismatch("predictor", (labeled.num_states, labeled.num_actions), predictor.shape)
    rewards = np.clip(predictor[unlabeled.states, unlabeled.actions], 0.0, 1.0)
    return EffectiveDataset(labeled, unlabeled, rewards, strategy="reward_predictor")


def cds_weights(candidate, reference, conservative_q, spec, mode="hard"):
    """
    Conservative data sharing weights, one per candidate transition.

    Δ(s, a) = Q(s, a) - k-th percentile of Q over the reference transitions.
    Hard mode keeps a transition iff Δ ≥ 0, where Δ within rounding of the
    threshold counts as 0. Soft mode uses σ(Δ/τ), where τ is
    a running average of mean |Δ| over fixed-order batches (seeded by the
    first batch, then decayed), clipped to spec.temperature_clip.

    Raises:
        EmptyDatasetError: the reference set is empty.
    """
    conservative_q = np.asarray(conservative_q, dtype=float)
    if conservative_q.shape != (reference.num_states, reference.num_actions):
        raise DimensionMismatch("conservative_q", (reference.num_states, reference.num_actions), conservative_q.shape)
    if len(reference) == 0:
        raise EmptyDatasetError("conservative data sharing needs a nonempty reference set")

    threshold = np.percentile(conservative_q[reference.states, reference.actions], spec.k_percentile)
    delta = conservative_q[candidate.states, candidate.actions] - threshold
    if mode == "hard":
        return (delta >= -TIE_RTOL * max(1.0, abs(threshold))).astype(float)
    if mode != "soft":
        raise ValueError(f"unknown weight mode '{mode}' (hard | soft)")

    lo, hi = spec.temperature_clip
    weights = np.empty_like(delta)
    tau = None
    for start in range(0, delta.size, spec.batch_size):
        batch = delta[start:start + spec.batch_size]
        batch_scale = float(np.mean(np.abs(batch)))
        if tau is None:
            tau = batch_scale
        else:
            tau = spec.temperature_decay * tau + (1.0 - spec.temperature_decay) * batch_scale
        weights[start:start + spec.batch_size] = expit(batch / min(max(tau, lo), hi))
    return weights


def apply_cds(labeled, unlabeled, shared_rewards, conservative_q, spec, mode="hard", strategy="cds_filter"):
    """Share unlabeled transitions with the given rewards, weighted by cds_weights against D_L."""
    weights = cds_weights(unlabeled, labeled, conservative_q, spec, mode)
    return EffectiveDataset(labeled, unlabeled, shared_rewards, weights, strategy=strategy)


def theorem3_objective(p, d_pi, d_L, C1, C2):
    """
    Reweighting objective Σ C1·d^π/√p + C2·d_L·d^π/p over supp(d^π).

    +inf when p vanishes at a pair with a positive coefficient.
    """
    p, d_pi, d_L = (np.asarray(x, dtype=float).ravel() for x in (p, d_pi, d_L))
    support = d_pi > 0
    coef1 = C1 * d_pi[support]
    coef2 = C2 * d_L[support] * d_pi[support]
    ps = p[support]
    if np.any((ps <= 0) & ((coef1 > 0) | (coef2 > 0))):
        return math.inf
    safe = np.where(ps > 0, ps, 1.0)
    return float(np.sum(coef1 / np.sqrt(safe) + coef2 / safe))


def theorem3_gradient(p, d_pi, d_L, C1, C2):
    p, d_pi, d_L = (np.asarray(x, dtype=float).ravel() for x in (p, d_pi, d_L))
    safe = np.where(p > 0, p, np.inf)
    return -0.5 * C1 * d_pi * safe ** -1.5 - C2 * d_L * d_pi / safe ** 2


@dataclass
class ReweightResult:
    """Optimal effective-behavior distribution p* and its diagnostics."""

    p: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int


def _as_table(d):
    return d.density if isinstance(d, OccupancyMeasure) else np.asarray(d, dtype=float)


def optimal_reweight(d_pi, d_L, C1, C2, restarts=10, seed=0, tol=1e-8, max_iters=20_000):
    """
    Minimize Σ C1·d^π/√p + C2·d_L·d^π/p over the simplex.

    Mirror descent on supp(d^π) (p is 0 elsewhere) from the uniform point and
    `restarts` random starts; the best run is returned.

    Raises:
        ConvergenceError: no run reached the KKT tolerance (carries the best iterate).
    """
    d_pi = _as_table(d_pi)
    d_L = _as_table(d_L)
    if d_pi.shape != d_L.shape:
        raise DimensionMismatch("d_L", d_pi.shape, d_L.shape)
    if C1 < 0 or C2 < 0 or C1 + C2 <= 0:
        raise ValueError(f"constants must be nonnegative and not both zero, got C1={C1}, C2={C2}")
    if abs(d_pi.sum() - 1.0) > 1e-9:
        raise InvalidDistribution("d_pi", f"sums to {d_pi.sum()!r}")

    flat_pi, flat_L = d_pi.ravel(), d_L.ravel()
    result = minimize_on_simplex(
        lambda p: theorem3_objective(p, flat_pi, flat_L, C1, C2),
        lambda p: theorem3_gradient(p, flat_pi, flat_L, C1, C2),
        flat_pi > 0,
        restarts=restarts,
        seed=seed,
        tol=tol,
        max_iters=max_iters,
    )
    return ReweightResult(result.x.reshape(d_pi.shape), result.value, result.residual, result.iterations)


def closed_form_bias_minimizer(d_pi, d_L):
    """
    Effective-behavior distribution ∝ √(d_L·d^π) that minimizes the reward bias.

    Pairs where either factor is zero get zero mass.

    Raises:
        InvalidDistribution: d_L and d^π have disjoint supports.
    """
    d_pi = _as_table(d_pi)
    d_L = _as_table(d_L)
    if d_pi.shape != d_L.shape:
        raise DimensionMismatch("d_L", d_pi.shape, d_L.shape)
    root = np.sqrt(np.clip(d_pi, 0.0, None) * np.clip(d_L, 0.0, None))
    total = root.sum()
    if total <= 0:
        raise InvalidDistribution("closed-form minimizer", "d_L and d_pi have disjoint supports")
    return root / total


def reweight_shared(labeled, unlabeled, target, strategy="optimal_reweight"):
    """
    Down-weight shared transitions pair by pair toward target·|D_L ∪ D_U|.

    A shared transition at (s, a) gets w = clip((p(s,a)·M - n_L(s,a)) / n_U(s,a), 0, 1)
    with M = |D_L| + |D_U|; shared rewards are 0.
    """
    total = len(labeled) + len(unlabeled)
    wanted = np.asarray(target, dtype=float) * total
    n_L = labeled.counts_sa.astype(float)
    n_U = unlabeled.counts_sa.astype(float)
    pair_weight = np.zeros_like(n_U)
    np.divide(wanted - n_L, n_U, out=pair_weight, where=n_U > 0)
    pair_weight = np.clip(pair_weight, 0.0, 1.0)
    weights = pair_weight[unlabeled.states, unlabeled.actions]
    return EffectiveDataset(labeled, unlabeled, np.zeros(len(unlabeled)), weights, strategy=strategy)


def _require(spec, value, name):
    if value is None:
        raise MissingContext(spec.kind, name)
    return value


def apply_strategy(spec, labeled, unlabeled, context=None):
    """
    Build the effective dataset for one strategy.

    Raises:
        MissingContext: the strategy needs an oracle, conservative Q table,
            policy occupancy or reweighting constants that `context` lacks.
    """
    spec = StrategySpec.from_dict(spec)
    context = context or StrategyContext()

    if spec.kind == "no_sharing":
        return apply_no_sharing(labeled)
    if spec.kind == "uds":
        return apply_uds(labeled, unlabeled)
    if spec.kind == "sharing_all":
        return apply_sharing_all(labeled, unlabeled, _require(spec, context.oracle, "oracle"))
    if spec.kind == "reward_predictor":
        predictor = context.predictor
        if predictor is None:
            predictor = fit_reward_predictor(labeled, spec.predictor_smoothing)
        effective = apply_reward_predictor(labeled, unlabeled, predictor)
        effective.predictor = predictor
        return effective

    if spec.kind in ("cds_filter", "cds_soft"):
        oracle = _require(spec, context.oracle, "oracle")
        q = _require(spec, context.conservative_q, "conservative_q")
        unlabeled = _check_inputs(labeled, unlabeled)
        rewards = oracle.reward[unlabeled.states, unlabeled.actions]
        mode = "hard" if spec.kind == "cds_filter" else "soft"
        return apply_cds(labeled, unlabeled, rewards, q, spec, mode, strategy=spec.kind)
    if spec.kind == "cds_uds":
        q = _require(spec, context.conservative_q, "conservative_q")
        unlabeled = _check_inputs(labeled, unlabeled)
        return apply_cds(labeled, unlabeled, np.zeros(len(unlabeled)), q, spec, spec.weight_mode, strategy="cds_uds")

    # optimal_reweight
    d_pi = _require(spec, context.policy_occupancy, "policy_occupancy")
    C1, C2 = _require(spec, context.reweight_constants, "reweight_constants")
    unlabeled = _check_inputs(labeled, unlabeled)
    if len(labeled) == 0:
        raise EmptyDatasetError("optimal_reweight needs labeled data for d_L")
    d_L = OccupancyMeasure.from_counts(labeled.counts_sa)
    reweighted = optimal_reweight(d_pi, d_L, C1, C2, restarts=spec.restarts, seed=context.seed)
    effective = reweight_shared(labeled, unlabeled, reweighted.p)
    effective.reweight = reweighted
    return effective
