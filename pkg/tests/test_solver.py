import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import softmax

from src.data import exhaustive_dataset
from src.helpers.errors import SupportViolation
from src.helpers.mdp_families import random_dense
from src.mdp import TabularPolicy, evaluate_return, optimal_policy, q_values
from src.relabel import apply_no_sharing, apply_uds
from src.solver import (
    ConservativeConfig,
    conservative_q_table,
    expected_divergence,
    improve_policy,
    regularized_objective,
    solve_conservative,
)
from tests.conftest import probability_vectors


def cql_step_objective(pi, q, beta, alpha):
    support = beta > 0
    return float(pi @ q - alpha * (np.sum(pi[support] ** 2 / beta[support]) - 1.0))


class TestConfig:
    def test_negative_alpha(self):
        with pytest.raises(ValueError):
            ConservativeConfig(alpha=-0.1)

    def test_unknown_divergence(self):
        with pytest.raises(ValueError):
            ConservativeConfig(divergence="tv")

    def test_dict_round_trip(self):
        config = ConservativeConfig(alpha=0.5, divergence="kl", max_iters=50)
        assert ConservativeConfig.from_dict(config.to_dict()) == config
        assert config.with_max_iters(200).max_iters == 200


class TestImprovePolicy:
    def test_greedy_when_unregularized(self):
        q = np.array([[0.0, 1.0], [3.0, 3.0]])
        policy = improve_policy(q, TabularPolicy.uniform(2, 2), alpha=0.0)
        np.testing.assert_array_equal(policy.probs, [[0.0, 1.0], [1.0, 0.0]])

    @pytest.mark.parametrize("divergence", ["cql", "kl"])
    def test_flat_q_returns_behavior(self, divergence):
        behavior = TabularPolicy(np.array([[0.2, 0.3, 0.5], [0.0, 0.6, 0.4]]))
        policy = improve_policy(np.full((2, 3), 4.0), behavior, alpha=0.7, divergence=divergence)
        np.testing.assert_allclose(policy.probs, behavior.probs, atol=1e-12)

    def test_kl_step_is_tilted_behavior(self):
        q = np.array([[1.0, 0.0, 0.5]])
        beta = np.array([[0.5, 0.25, 0.25]])
        policy = improve_policy(q, TabularPolicy(beta), alpha=2.0, divergence="kl")
        np.testing.assert_allclose(policy.probs, softmax(q / 2.0 + np.log(beta), axis=1))

    def test_mass_stays_on_behavior_support(self):
        q = np.array([[0.0, 10.0, 1.0]])
        policy = improve_policy(q, TabularPolicy(np.array([[0.5, 0.0, 0.5]])), alpha=0.1)
        assert policy.probs[0, 1] == 0.0

    @pytest.mark.property
    @settings(max_examples=60, deadline=None)
    @given(
        beta=probability_vectors(size=4),
        q=st.lists(st.floats(-5.0, 5.0), min_size=4, max_size=4),
        alpha=st.floats(0.05, 5.0),
        seed=st.integers(0, 2**16),
    )
    def test_cql_step_beats_random_points(self, beta, q, alpha, seed):
        q = np.array(q)
        best = improve_policy(q[None, :], TabularPolicy(beta[None, :]), alpha).probs[0]
        value = cql_step_objective(best, q, beta, alpha)
        for candidate in np.random.default_rng(seed).dirichlet(np.ones(4), size=50):
            assert value >= cql_step_objective(candidate, q, beta, alpha) - 1e-9


class TestConservativeQ:
    @pytest.mark.parametrize("divergence", ["cql", "kl"])
    def test_matches_linear_solve_of_modified_reward(self, divergence):
        mdp = random_dense(num_states=4, num_actions=3, seed=3, discount=0.9)
        behavior = TabularPolicy.uniform(4, 3)
        policy = TabularPolicy(np.random.default_rng(3).dirichlet(np.ones(3), size=4))
        table = conservative_q_table(mdp, behavior, policy, alpha=1.0, divergence=divergence)

        ratio = policy.probs / behavior.probs
        if divergence == "kl":
            penalty = policy.probs * np.log(ratio)
        else:
            penalty = policy.probs * (ratio - 1.0)
        modified = mdp.reward - penalty
        kernel = np.einsum("sa,sat->st", policy.probs, mdp.transition)
        values = np.linalg.solve(np.eye(4) - 0.9 * kernel, np.sum(policy.probs * modified, axis=1))
        expected = modified + 0.9 * np.einsum("sat,t->sa", mdp.transition, values)

        np.testing.assert_allclose(table, expected, atol=1e-10)
        np.testing.assert_allclose(np.sum(policy.probs * table, axis=1), values, atol=1e-10)

    def test_unregularized_is_plain_q(self, dense_mdp):
        policy = optimal_policy(dense_mdp)
        table = conservative_q_table(dense_mdp, TabularPolicy.uniform(5, 3), policy, alpha=0.0)
        np.testing.assert_allclose(table, q_values(dense_mdp, policy))

    def test_behavior_policy_has_no_penalty(self, dense_mdp):
        behavior = TabularPolicy(np.random.default_rng(2).dirichlet(np.ones(3), size=5))
        table = conservative_q_table(dense_mdp, behavior, behavior, alpha=3.0)
        np.testing.assert_allclose(table, q_values(dense_mdp, behavior), atol=1e-10)

    def test_off_support_policy_is_rejected(self, two_state_mdp):
        behavior = TabularPolicy(np.array([[1.0, 0.0], [0.5, 0.5]]))
        with pytest.raises(SupportViolation):
            conservative_q_table(two_state_mdp, behavior, TabularPolicy.uniform(2, 2), alpha=1.0)


class TestObjective:
    def test_unregularized_objective_is_return(self, dense_mdp):
        policy = TabularPolicy.uniform(5, 3)
        value = regularized_objective(dense_mdp, policy, policy, alpha=0.0)
        assert value == pytest.approx(evaluate_return(dense_mdp, policy), abs=1e-10)

    def test_reachable_support_violation(self, two_state_mdp):
        behavior = TabularPolicy(np.array([[1.0, 0.0], [0.5, 0.5]]))
        policy = TabularPolicy(np.array([[0.0, 1.0], [0.5, 0.5]]))
        assert regularized_objective(two_state_mdp, policy, behavior, alpha=1.0) == -np.inf

    def test_unreachable_violation_does_not_count(self, two_state_mdp):
        behavior = TabularPolicy(np.array([[1.0, 0.0], [1.0, 0.0]]))
        policy = TabularPolicy(np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert regularized_objective(two_state_mdp, policy, behavior, alpha=1.0) == pytest.approx(5.0)
        assert expected_divergence(two_state_mdp, policy, behavior) == 0.0

    def test_behavior_has_zero_divergence(self, dense_mdp):
        behavior = TabularPolicy.uniform(5, 3)
        assert expected_divergence(dense_mdp, behavior, behavior) == 0.0


class TestSolveConservative:
    @pytest.mark.parametrize("fixture", ["two_state_mdp", "chain_mdp"])
    def test_exact_data_recovers_optimum(self, fixture, request):
        mdp = request.getfixturevalue(fixture)
        per_pair = 1 if fixture == "two_state_mdp" else 10
        effective = apply_no_sharing(exhaustive_dataset(mdp, per_pair=per_pair))
        result = solve_conservative(effective, ConservativeConfig(alpha=0.0), mdp.discount, mdp.initial_dist)
        np.testing.assert_array_equal(result.policy.probs, optimal_policy(mdp).probs)
        assert result.empirical_return == pytest.approx(evaluate_return(mdp, optimal_policy(mdp)), abs=1e-9)
        assert result.converged

    def test_large_alpha_stays_at_behavior(self, dense_mdp, uds_pair):
        effective = apply_uds(*uds_pair)
        result = solve_conservative(effective, ConservativeConfig(alpha=1e4), 0.9, dense_mdp.initial_dist)
        assert result.policy.total_variation(effective.behavior).max() <= 1e-3

    @pytest.mark.parametrize("alpha", [0.0, 0.1, 1.0])
    @pytest.mark.parametrize("divergence", ["cql", "kl"])
    def test_objective_trace_never_decreases(self, alpha, divergence, dense_mdp, uds_pair):
        effective = apply_uds(*uds_pair)
        config = ConservativeConfig(alpha=alpha, divergence=divergence)
        result = solve_conservative(effective, config, 0.9, dense_mdp.initial_dist)
        trace = np.array(result.objective_trace)
        assert np.all(np.diff(trace) >= -1e-9 * np.maximum(1.0, np.abs(trace[1:])))

    @pytest.mark.parametrize("divergence", ["cql", "kl"])
    def test_divergence_shrinks_as_alpha_grows(self, divergence, dense_mdp, uds_pair):
        effective = apply_uds(*uds_pair)
        divergences = [
            solve_conservative(
                effective, ConservativeConfig(alpha=alpha, divergence=divergence), 0.9, dense_mdp.initial_dist
            ).divergence_value
            for alpha in (0.01, 0.1, 0.3, 1.0, 3.0, 10.0)
        ]
        assert np.all(np.diff(divergences) <= 1e-6), divergences

    def test_result_serializes(self, two_state_mdp):
        effective = apply_no_sharing(exhaustive_dataset(two_state_mdp))
        result = solve_conservative(effective, ConservativeConfig(alpha=0.5), 0.9, two_state_mdp.initial_dist)
        doc = json.loads(result.to_json())
        assert doc["iterations"] == result.iterations
        assert np.asarray(doc["policy"]).shape == (2, 2)
