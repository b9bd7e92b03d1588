"""
Safe-policy-improvement bound terms, evaluated exactly on tabular instances.

The guarantee checked by theorem1_report is

    J(π*) ≥ J(π_β^eff) - ζ + (c),   ζ = (a) + (b)

(a) reward bias        (1/(1-γ)) Σ (d̂^{π_β^eff} - d̂^π)(s,a) · Δr(s,a)
(b) sampling error     (2γC_P/(1-γ)²) E_{s~d̂^π}[√|A| / √|D^eff(s)| · √(D_CQL(s) + 1)]
                       + (2C_r/(1-γ)) E_{(s,a)~d̂^π}[f(s,a) / √|D_L(s,a)|]
(c) policy improvement (α/(1-γ)) · D(π*, π_β^eff)

Occupancies with a hat live on the empirical MDP of the effective dataset;
the J values in the inequality are computed on the true MDP.
"""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from src.helpers.errors import CoverageViolation, DimensionMismatch
from src.helpers.simplex import minimize_on_simplex
from src.mdp import evaluate_return, occupancy, policy_divergence


def uds_reward_error(f_table, reward):
    """Δr = (1 - f)·r, the reward error of zero-labeled sharing (never negative)."""
    return (1.0 - np.asarray(f_table, dtype=float)) * np.asarray(reward, dtype=float)


def predictor_reward_error(reward, predicted):
    """Δr = r - r̂_φ; takes both signs in general."""
    return np.asarray(reward, dtype=float) - np.asarray(predicted, dtype=float)


def effective_reward_error(effective, reward):
    """
    Δr = r - E[r̂^eff] for any strategy, where labeled transitions contribute
    the true reward and shared ones their assigned reward. Zero at pairs with
    no data. Equals (1 - f)·r for zero-labeled sharing.
    """
    reward = np.asarray(reward, dtype=float)
    dataset = effective.dataset
    shared_mass = dataset.pair_counts(effective.weights * effective.assigned_rewards * effective.shared_mask)
    expected = np.zeros_like(reward)
    covered = effective.counts_eff > 0
    np.divide(effective.labeled_counts * reward + shared_mass, effective.counts_eff, out=expected, where=covered)
    return np.where(covered, reward - expected, 0.0)


def _empirical(effective, discount, initial_dist, mdp):
    if mdp is not None:
        return mdp
    return effective.empirical_mdp(discount, initial_dist, strict=False)


def reward_bias(effective, learned_policy, reward_error, discount, initial_dist, mdp=None):
    """
    Term (a): (1/(1-γ)) Σ (d̂^{π_β^eff} - d̂^π)(s,a) · Δr(s,a).

    Args:
        effective (EffectiveDataset): Training data.
        learned_policy (TabularPolicy): π.
        reward_error (array): Δr table, e.g. uds_reward_error or predictor_reward_error.
        discount (float): γ.
        initial_dist (array): ρ.
        mdp (TabularMdp, optional): Empirical MDP of `effective`, if already built.

    Returns:
        float
    """
    mdp = _empirical(effective, discount, initial_dist, mdp)
    reward_error = np.asarray(reward_error, dtype=float)
    if reward_error.shape != (mdp.num_states, mdp.num_actions):
        raise DimensionMismatch("reward_error", (mdp.num_states, mdp.num_actions), reward_error.shape)
    gap = occupancy(mdp, effective.behavior).density - occupancy(mdp, learned_policy).density
    return float(np.sum(gap * reward_error) / (1.0 - mdp.discount))


def reward_bias_term_a(effective, learned_policy, reward, discount, initial_dist, mdp=None):
    """
    Term (a) for zero-labeled sharing through value functions: Ĵ(π_β^eff) - Ĵ(π)
    on the empirical MDP with reward (1 - f)·r.
    """
    mdp = _empirical(effective, discount, initial_dist, mdp)
    bias_reward = uds_reward_error(effective.f_table, reward)
    return evaluate_return(mdp, effective.behavior, bias_reward) - evaluate_return(mdp, learned_policy, bias_reward)


def _uncovered_support_states(d_states, state_counts):
    return [int(s) for s in np.flatnonzero((d_states > 0) & (state_counts <= 0))]


def sampling_error_bound(effective, learned_policy, c_p, discount, initial_dist, c_r=0.0, mdp=None, strict=True):
    """
    Term (b), with the explicit constants of the proof.

    Raises:
        CoverageViolation: strict mode and π reaches a state without data.
            In lenient mode that case returns +inf.
    """
    mdp = _empirical(effective, discount, initial_dist, mdp)
    gamma = mdp.discount
    occ = occupancy(mdp, learned_policy)
    d_states = occ.state_marginal
    state_counts = effective.state_counts

    missing = _uncovered_support_states(d_states, state_counts)
    if missing:
        if strict:
            raise CoverageViolation(missing, kind="states")
        return math.inf

    divergence = policy_divergence(learned_policy, effective.behavior, "cql")
    reached = d_states > 0
    if np.any(~np.isfinite(divergence[reached])):
        return math.inf
    per_state = np.sqrt(mdp.num_actions) / np.sqrt(state_counts[reached]) * np.sqrt(divergence[reached] + 1.0)
    transition_term = 2.0 * gamma * c_p / (1.0 - gamma) ** 2 * float(np.sum(d_states[reached] * per_state))

    reward_term = 0.0
    if c_r > 0:
        reward_term = 2.0 * c_r / (1.0 - gamma) * labeled_concentration_sum(effective, occ.density)
    return transition_term + reward_term


def labeled_concentration_sum(effective, density):
    """E_{(s,a)~d}[f(s,a)/√|D_L(s,a)|]; +inf if d weights a pair with f > 0 but no labels."""
    n_L = effective.labeled_counts
    weight = np.asarray(density, dtype=float) * effective.f_table
    active = weight > 0
    if np.any(n_L[active] <= 0):
        return math.inf
    return float(np.sum(weight[active] / np.sqrt(n_L[active])))


def reward_concentration_term(effective, learned_policy, c_r, discount, initial_dist, mdp=None):
    """
    Reward-concentration diagnostic Σ_s d̂^π(s) Σ_a f·C_r/√|D_L(s)| · π/√π̂_β(a|s),
    with π̂_β the labeled data's own behavior policy.
    """
    mdp = _empirical(effective, discount, initial_dist, mdp)
    return c_r * labeled_concentration_sum(effective, occupancy(mdp, learned_policy).density)


def concentration_constants(num_samples_table, delta, reward_range=1.0, model="hoeffding"):
    """
    Hoeffding constants with a union bound over all (s, a).

    C_r = range·√(ln(2|S||A|/δ)/2)
    C_P = √(2(|S| ln 2 + ln(2|S||A|/δ)))   (L1 deviation of next-state distributions)

    Returns:
        tuple: (c_r, c_p)
    """
    if model != "hoeffding":
        raise ValueError(f"unknown concentration model '{model}' (hoeffding)")
    if not 0.0 < delta <= 1.0:
        raise ValueError(f"delta must lie in (0, 1], got {delta}")
    num_states, num_actions = np.shape(num_samples_table)[:2]
    log_term = math.log(2.0 * num_states * num_actions / delta)
    c_r = reward_range * math.sqrt(log_term / 2.0)
    c_p = math.sqrt(2.0 * (num_states * math.log(2.0) + log_term))
    return c_r, c_p


def theorem3_constants(labeled_size, effective_size, c_p, discount):
    """
    Constants of the reweighting objective.

    C1 = γ·C_P / ((1-γ)²·√|D_eff|),  C2 = |D_L| / ((1-γ)·|D_eff|)
    """
    if labeled_size <= 0 or effective_size <= 0:
        raise ValueError("dataset sizes must be positive")
    C1 = discount * c_p / ((1.0 - discount) ** 2 * math.sqrt(effective_size))
    C2 = labeled_size / ((1.0 - discount) * effective_size)
    return C1, C2


def sampling_error_lemma(d_pi, d_beta, c_p, dataset_size, discount):
    """γC_P/((1-γ)²√|D|) · Σ d̂^π/√d̂^{π_β}; +inf when d̂^π leaves supp(d̂^{π_β})."""
    d_pi = np.asarray(getattr(d_pi, "density", d_pi), dtype=float)
    d_beta = np.asarray(getattr(d_beta, "density", d_beta), dtype=float)
    active = d_pi > 0
    if np.any(d_beta[active] <= 0):
        return math.inf
    scale = discount * c_p / ((1.0 - discount) ** 2 * math.sqrt(dataset_size))
    return float(scale * np.sum(d_pi[active] / np.sqrt(d_beta[active])))


def _bias_terms(d_pi, d_L, reward):
    d_pi = np.asarray(getattr(d_pi, "density", d_pi), dtype=float).ravel()
    d_L = np.asarray(getattr(d_L, "density", d_L), dtype=float).ravel()
    if reward is None:
        reward = np.ones_like(d_pi)
    reward = np.asarray(reward, dtype=float).ravel()
    if not d_pi.shape == d_L.shape == reward.shape:
        raise DimensionMismatch("reward_bias_objective", d_pi.shape, (d_L.shape, reward.shape))
    return d_pi, d_L, reward


def reward_bias_objective(p, d_pi, d_L, labeled_size, effective_size, reward=None):
    """
    Reward-bias objective as a function of the effective-behavior occupancy p:

        Σ p·r + |D_L|/|D_eff| · Σ d_L·r·(d̂^π/p - 1)

    with occupancies normalized, so no horizon factor appears. `reward=None`
    uses r ≡ 1, the worst case allowed by r ≤ 1; for any constant reward the
    minimizer is the closed form ∝ √(d_L·d̂^π). Returns +inf where p = 0 at a
    pair whose ratio term is active.
    """
    d_pi, d_L, reward = _bias_terms(d_pi, d_L, reward)
    p = np.asarray(p, dtype=float).ravel()
    weight = labeled_size / effective_size * d_L * reward
    active = weight > 0
    if np.any(p[active & (d_pi > 0)] <= 0):
        return math.inf
    ratio = np.divide(d_pi, p, out=np.zeros_like(p), where=p > 0)
    return float(np.sum(p * reward) + np.sum(weight[active] * (ratio[active] - 1.0)))


def reward_bias_gradient(p, d_pi, d_L, labeled_size, effective_size, reward=None):
    d_pi, d_L, reward = _bias_terms(d_pi, d_L, reward)
    p = np.asarray(p, dtype=float).ravel()
    weight = labeled_size / effective_size * d_L * reward
    curvature = np.divide(weight * d_pi, p ** 2, out=np.zeros_like(p), where=p > 0)
    return reward - curvature


def minimize_reward_bias_objective(d_pi, d_L, labeled_size, effective_size, reward=None,
                                   restarts=10, seed=0, tol=1e-9):
    """
    Numeric minimizer of reward_bias_objective over the whole simplex.

    Returns:
        SimplexResult (x has the shape of d_pi flattened)
    """
    d_pi_flat, _, _ = _bias_terms(d_pi, d_L, reward)
    return minimize_on_simplex(
        lambda p: reward_bias_objective(p, d_pi, d_L, labeled_size, effective_size, reward),
        lambda p: reward_bias_gradient(p, d_pi, d_L, labeled_size, effective_size, reward),
        np.ones(d_pi_flat.shape, dtype=bool),
        restarts=restarts,
        seed=seed,
        tol=tol,
    )


@dataclass
class BoundReport:
    term_a_reward_bias: float
    term_b_sampling_error: float
    term_c_policy_improvement: float
    zeta_err: float
    j_true_learned: float
    j_true_behavior: float
    j_empirical_learned: float
    guarantee_holds: bool
    delta: float
    c_r: float
    c_p: float
    alpha: float = 0.0
    divergence: str = "cql"
    vacuous: bool = False
    delta1_prime: float = math.nan

    def to_dict(self):
        return asdict(self)

    def to_json(self, indent=None):
        return json.dumps(self.to_dict(), indent=indent)

    def to_row(self):
        """Flat row for sweep CSVs; booleans become 0/1."""
        return {k: (int(v) if isinstance(v, bool) else v) for k, v in self.to_dict().items()}


def theorem1_report(mdp, effective, result, delta=0.1, alpha=0.0, divergence="cql", strict=False):
    """
    Assemble every term of the guarantee and evaluate it literally.

    Args:
        mdp (TabularMdp): True MDP (J values).
        effective (EffectiveDataset): Training data of the solve.
        result (SolveResult): Output of solve_conservative on `effective`.
        delta (float): Failure probability of the concentration constants.
        alpha (float): α used by the solve.
        divergence (str): Divergence used by the solve (term c).
        strict (bool): Raise instead of reporting +inf when π reaches an uncovered state.

    Returns:
        BoundReport
    """
    gamma = mdp.discount
    empirical = result.empirical_mdp
    if empirical is None:
        empirical = effective.empirical_mdp(gamma, mdp.initial_dist, strict=False)
    c_r, c_p = concentration_constants(effective.counts_eff, delta)
    policy = result.policy

    term_a = reward_bias(effective, policy, effective_reward_error(effective, mdp.reward),
                         gamma, mdp.initial_dist, mdp=empirical)
    term_b = sampling_error_bound(effective, policy, c_p, gamma, mdp.initial_dist, c_r=c_r,
                                  mdp=empirical, strict=strict)
    term_c = 0.0 if alpha == 0 else alpha / (1.0 - gamma) * result.divergence_value
    zeta = term_a + term_b

    j_learned = evaluate_return(mdp, policy)
    j_behavior = evaluate_return(mdp, effective.behavior)
    return BoundReport(
        term_a_reward_bias=term_a,
        term_b_sampling_error=term_b,
        term_c_policy_improvement=term_c,
        zeta_err=zeta,
        j_true_learned=j_learned,
        j_true_behavior=j_behavior,
        j_empirical_learned=result.empirical_return,
        guarantee_holds=bool(j_learned >= j_behavior - zeta + term_c),
        delta=delta,
        c_r=c_r,
        c_p=c_p,
        alpha=alpha,
        divergence=divergence,
        vacuous=not math.isfinite(term_b),
        delta1_prime=reward_concentration_term(effective, policy, c_r, gamma, mdp.initial_dist, mdp=empirical),
    )
