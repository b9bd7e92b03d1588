"""
Conservative offline RL on the empirical MDP of an effective dataset.

Solves  max_π  Ĵ(π) - α/(1-γ) · E_{s~d̂^π}[D(π, π_β^eff)(s)]  exactly by
regularized policy iteration: evaluate the current policy under the state
reward Σ_a π r - α·D_s(π), form Q = r + γ P V, and improve every state by the
one-step regularized maximization

    max_{π(·|s) ∈ simplex}  Σ_a π(a|s) Q(s, a) - α·D_s(π)

which has a closed form for both divergences (active-set sweep for D_CQL,
tilted softmax for KL). Improvement is monotone, so the objective trace never
decreases.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from src.helpers.errors import SupportViolation
from src.mdp import (
    TabularPolicy,
    evaluate_return,
    greedy_actions,
    occupancy,
    policy_divergence,
    q_values,
    state_values,
)

DIVERGENCES = ("cql", "kl")


@dataclass(frozen=True)
class ConservativeConfig:
    """
    alpha: conservatism coefficient α ≥ 0
    divergence: cql | kl
    max_iters: policy-iteration cap
    tol: convergence threshold on max |Δπ|
    strict: require full coverage when building the empirical MDP
    """

    alpha: float = 1.0
    divergence: str = "cql"
    max_iters: int = 1000
    tol: float = 1e-8
    strict: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be nonnegative, got {self.alpha}")
        if self.tol <= 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.divergence not in DIVERGENCES:
            raise ValueError(f"unknown divergence '{self.divergence}' (cql | kl)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

    @classmethod
    def from_dict(cls, doc):
        doc = doc or {}
        return cls(
            alpha=float(doc.get("alpha", 1.0)),
            divergence=doc.get("divergence", "cql"),
            max_iters=int(doc.get("max_iters", 1000)),
            tol=float(doc.get("tol", 1e-8)),
            strict=bool(doc.get("strict", False)),
        )

    def to_dict(self):
        return {
            "alpha": self.alpha,
            "divergence": self.divergence,
            "max_iters": self.max_iters,
            "tol": self.tol,
            "strict": self.strict,
        }

    def with_max_iters(self, max_iters):
        return ConservativeConfig(self.alpha, self.divergence, int(max_iters), self.tol, self.strict)


@dataclass
class SolveResult:
    policy: TabularPolicy
    q_values: np.ndarray
    conservative_q: np.ndarray
    empirical_return: float
    divergence_value: float
    iterations: int
    converged: bool
    objective_trace: list = field(default_factory=list)
    empirical_mdp: object = None
    behavior: TabularPolicy = None

    def to_dict(self):
        return {
            "policy": self.policy.probs.tolist(),
            "q_values": self.q_values.tolist(),
            "conservative_q": self.conservative_q.tolist(),
            "empirical_return": self.empirical_return,
            "divergence_value": self.divergence_value,
            "iterations": self.iterations,
            "converged": self.converged,
            "objective_trace": list(self.objective_trace),
        }

    def to_json(self, indent=None):
        return json.dumps(self.to_dict(), indent=indent)


def _regularized_state_reward(mdp, policy, behavior, alpha, divergence):
    base = np.sum(policy.probs * mdp.reward, axis=1)
    if alpha == 0:
        return base
    return base - alpha * policy_divergence(policy, behavior, divergence)


def regularized_objective(mdp, policy, behavior, alpha, divergence="cql"):
    """
    Ĵ(π) - α/(1-γ)·E_{s~d̂^π} D(π, π_β)(s), evaluated exactly on `mdp`.

    -inf when α > 0 and π leaves the support of π_β at a reachable state.
    """
    state_reward = _regularized_state_reward(mdp, policy, behavior, alpha, divergence)
    if not np.all(np.isfinite(state_reward)):
        d_states = occupancy(mdp, policy).state_marginal
        if np.any(d_states[~np.isfinite(state_reward)] > 0):
            return -np.inf
        state_reward = np.where(np.isfinite(state_reward), state_reward, 0.0)
    return float(mdp.initial_dist @ state_values(mdp, policy, state_reward=state_reward))


def _improve_cql(q_row, beta_row, alpha):
    """argmax_π Σ π q - α Σ π²/β over the simplex restricted to supp(β)."""
    support = np.flatnonzero(beta_row > 0)
    order = support[np.argsort(-q_row[support], kind="stable")]
    q_sorted = q_row[order]
    b_sorted = beta_row[order]
    cum_bq = np.cumsum(b_sorted * q_sorted)
    cum_b = np.cumsum(b_sorted)
    lam = (cum_bq[-1] - 2.0 * alpha) / cum_b[-1]
    for m in range(len(order)):
        candidate = (cum_bq[m] - 2.0 * alpha) / cum_b[m]
        below_next = m + 1 == len(order) or q_sorted[m + 1] <= candidate
        if q_sorted[m] > candidate and below_next:
            lam = candidate
            break
    probs = np.zeros_like(q_row)
    probs[support] = beta_row[support] * np.clip(q_row[support] - lam, 0.0, None) / (2.0 * alpha)
    return probs / probs.sum()


def improve_policy(q, behavior, alpha, divergence="cql"):
    """
    Per-state regularized greedy step.

    α = 0 gives the plain greedy policy (ties to the lowest action index);
    otherwise mass is confined to supp(π_β).
    """
    if alpha == 0:
        return TabularPolicy.deterministic(greedy_actions(q), q.shape[1])
    beta = behavior.probs
    if divergence == "kl":
        logits = np.where(beta > 0, q / alpha + np.log(np.where(beta > 0, beta, 1.0)), -np.inf)
        return TabularPolicy(softmax(logits, axis=1))
    probs = np.vstack([_improve_cql(q[s], beta[s], alpha) for s in range(q.shape[0])])
    return TabularPolicy(probs)


def solve_regularized(mdp, behavior, config):
    """
    Regularized policy iteration on a given MDP.

    Returns:
        tuple: (policy, iterations, converged, objective_trace)
    """
    alpha, divergence = config.alpha, config.divergence
    policy = behavior
    trace = []
    converged = False
    iterations = 0
    current_actions = None

    for iterations in range(1, config.max_iters + 1):
        state_reward = _regularized_state_reward(mdp, policy, behavior, alpha, divergence)
        values = state_values(mdp, policy, state_reward=state_reward)
        trace.append(float(mdp.initial_dist @ values))
        q = q_values(mdp, policy, values=values)

        if alpha == 0:
            # switch a state only on strict improvement, so tied actions cannot cycle
            greedy = greedy_actions(q)
            if current_actions is None:
                next_actions = greedy
            else:
                rows = np.arange(mdp.num_states)
                best = q.max(axis=1)
                improvable = best > q[rows, current_actions] + 1e-10 * np.maximum(1.0, np.abs(best))
                next_actions = np.where(improvable, greedy, current_actions)
            new_policy = TabularPolicy.deterministic(next_actions, mdp.num_actions)
            current_actions = next_actions
        else:
            new_policy = improve_policy(q, behavior, alpha, divergence)

        change = float(np.abs(new_policy.probs - policy.probs).max())
        policy = new_policy
        if change < config.tol:
            converged = True
            break

    if alpha == 0:
        policy = TabularPolicy.deterministic(greedy_actions(q_values(mdp, policy)), mdp.num_actions)
    return policy, iterations, converged, trace


def conservative_q_table(mdp, behavior, policy, alpha, divergence="cql"):
    """
    Q-values of `policy` under the modified reward r(s,a) - α·π(a|s)(π(a|s)/π_β(a|s) - 1).

    This is the ordinary Q^π of the MDP whose reward is the modified table,
    so Σ_a π(a|s) Q(s,a) is the value of π under that reward. With kind="kl"
    the per-pair penalty is α·π log(π/π_β).

    Raises:
        SupportViolation: π(a|s) > 0 where π_β(a|s) = 0.
    """
    pi = policy.probs
    beta = behavior.probs
    bad = np.argwhere((pi > 0) & (beta <= 0))
    if alpha > 0 and bad.size:
        pair = tuple(int(i) for i in bad[0])
        raise SupportViolation(pair, f"policy puts mass on {pair} outside the behavior support")
    if alpha == 0:
        return q_values(mdp, policy)

    ratio = np.divide(pi, beta, out=np.ones_like(pi), where=beta > 0)
    if divergence == "kl":
        penalty = np.where(pi > 0, pi * np.log(np.where(pi > 0, ratio, 1.0)), 0.0)
    else:
        penalty = pi * (ratio - 1.0)
    return q_values(mdp, policy, reward=mdp.reward - alpha * penalty)


def conservative_q(effective, policy, alpha, discount, divergence="cql", mdp=None):
    """
    Conservative Q table of `policy` on the empirical MDP of `effective`
    (the table conservative data sharing thresholds).
    """
    if mdp is None:
        initial = np.full(effective.num_states, 1.0 / effective.num_states)
        mdp = effective.empirical_mdp(discount, initial, strict=False)
    return conservative_q_table(mdp, effective.behavior, policy, alpha, divergence)


def expected_divergence(mdp, policy, behavior, divergence="cql"):
    """E_{s~d̂^π}[D(π, π_β)(s)]; states π never reaches do not count."""
    per_state = policy_divergence(policy, behavior, divergence)
    d_states = occupancy(mdp, policy).state_marginal
    reached = d_states > 0
    if np.any(~np.isfinite(per_state[reached])):
        return float("inf")
    return float(np.sum(d_states[reached] * per_state[reached]))


def solve_conservative(effective, config, discount, initial_dist):
    """
    Conservative offline solve on an effective dataset.

    Args:
        effective (EffectiveDataset): Training data with r̂^eff and π_β^eff.
        config (ConservativeConfig): α, divergence, iteration cap, tolerance.
        discount (float): γ.
        initial_dist (array): ρ.

    Returns:
        SolveResult
    """
    mdp = effective.empirical_mdp(discount, initial_dist, strict=config.strict)
    behavior = effective.behavior
    policy, iterations, converged, trace = solve_regularized(mdp, behavior, config)
    return SolveResult(
        policy=policy,
        q_values=q_values(mdp, policy),
        conservative_q=conservative_q_table(mdp, behavior, policy, config.alpha, config.divergence),
        empirical_return=evaluate_return(mdp, policy),
        divergence_value=expected_divergence(mdp, policy, behavior, config.divergence),
        iterations=iterations,
        converged=converged,
        objective_trace=trace,
        empirical_mdp=mdp,
        behavior=behavior,
    )
