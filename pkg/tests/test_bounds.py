import dataclasses
import json
import math

import numpy as np
import pytest

from src.bounds import (
    concentration_constants,
    effective_reward_error,
    minimize_reward_bias_objective,
    predictor_reward_error,
    reward_bias,
    reward_bias_objective,
    reward_bias_term_a,
    sampling_error_bound,
    sampling_error_lemma,
    theorem1_report,
    theorem3_constants,
    uds_reward_error,
)
from src.data import exhaustive_dataset, merge
from src.helpers.errors import CoverageViolation
from src.mdp import TabularPolicy
from src.relabel import apply_no_sharing, apply_sharing_all, apply_uds, closed_form_bias_minimizer
from src.solver import ConservativeConfig, solve_conservative


@pytest.fixture
def uds_solve(dense_mdp, uds_pair):
    effective = apply_uds(*uds_pair)
    result = solve_conservative(effective, ConservativeConfig(alpha=1.0), 0.9, dense_mdp.initial_dist)
    return effective, result


@pytest.fixture
def state_zero_only(two_state_mdp):
    """Exhaustive two-state data with every transition out of state 1 removed."""
    return apply_no_sharing(exhaustive_dataset(two_state_mdp).subset(np.array([True, True, False, False])))


GO_TO_STATE_ONE = TabularPolicy(np.array([[0.0, 1.0], [1.0, 0.0]]))


class TestRewardError:
    def test_uds_error_is_nonnegative(self, dense_mdp, uds_pair):
        effective = apply_uds(*uds_pair)
        assert uds_reward_error(effective.f_table, dense_mdp.reward).min() >= 0.0

    def test_effective_error_matches_uds_formula(self, dense_mdp, uds_pair):
        effective = apply_uds(*uds_pair)
        np.testing.assert_allclose(
            effective_reward_error(effective, dense_mdp.reward),
            uds_reward_error(effective.f_table, dense_mdp.reward),
            atol=1e-12,
        )

    def test_oracle_sharing_has_no_error(self, dense_mdp, uds_pair):
        effective = apply_sharing_all(*uds_pair, dense_mdp)
        np.testing.assert_allclose(effective_reward_error(effective, dense_mdp.reward), 0.0, atol=1e-12)

    def test_predictor_error_takes_both_signs(self):
        error = predictor_reward_error([[0.2, 0.8]], [[0.5, 0.5]])
        np.testing.assert_allclose(error, [[-0.3, 0.3]])


class TestRewardBias:
    def test_occupancy_and_value_forms_agree(self, dense_mdp, uds_solve):
        effective, result = uds_solve
        error = uds_reward_error(effective.f_table, dense_mdp.reward)
        by_occupancy = reward_bias(effective, result.policy, error, 0.9, dense_mdp.initial_dist)
        by_values = reward_bias_term_a(effective, result.policy, dense_mdp.reward, 0.9, dense_mdp.initial_dist)
        assert by_occupancy == pytest.approx(by_values, abs=1e-9)

    def test_zero_for_behavior_policy(self, dense_mdp, uds_pair):
        effective = apply_uds(*uds_pair)
        error = uds_reward_error(effective.f_table, dense_mdp.reward)
        assert reward_bias(effective, effective.behavior, error, 0.9, dense_mdp.initial_dist) == pytest.approx(
            0.0, abs=1e-12
        )


class TestSamplingError:
    def test_four_copies_halve_the_bound(self, dense_mdp, uds_pair):
        labeled, unlabeled = uds_pair
        policy = TabularPolicy.uniform(5, 3)
        once = apply_uds(labeled, unlabeled)
        four = apply_uds(merge([labeled] * 4), merge([unlabeled] * 4))
        args = dict(c_p=1.5, discount=0.9, initial_dist=dense_mdp.initial_dist, c_r=0.7, strict=False)
        assert sampling_error_bound(four, policy, **args) == pytest.approx(
            sampling_error_bound(once, policy, **args) / 2.0, rel=1e-9
        )

    def test_strict_mode_names_uncovered_states(self, state_zero_only, two_state_mdp):
        with pytest.warns(UserWarning), pytest.raises(CoverageViolation) as info:
            sampling_error_bound(state_zero_only, GO_TO_STATE_ONE, 1.0, 0.9, two_state_mdp.initial_dist)
        assert info.value.missing == [1]

    def test_lenient_mode_is_infinite(self, state_zero_only, two_state_mdp):
        with pytest.warns(UserWarning):
            value = sampling_error_bound(
                state_zero_only, GO_TO_STATE_ONE, 1.0, 0.9, two_state_mdp.initial_dist, strict=False
            )
        assert value == math.inf


class TestConstants:
    def test_hoeffding_formulas(self):
        c_r, c_p = concentration_constants(np.zeros((4, 2)), delta=0.1)
        log_term = math.log(160.0)
        assert c_r == pytest.approx(math.sqrt(log_term / 2.0))
        assert c_p == pytest.approx(math.sqrt(2.0 * (4 * math.log(2.0) + log_term)))

    @pytest.mark.parametrize("delta", [0.0, -0.1, 1.5])
    def test_invalid_delta(self, delta):
        with pytest.raises(ValueError):
            concentration_constants(np.zeros((4, 2)), delta=delta)

    def test_unknown_model(self):
        with pytest.raises(ValueError):
            concentration_constants(np.zeros((4, 2)), delta=0.1, model="bernstein")

    def test_deviations_stay_inside_the_constants(self):
        delta, n, trials = 0.1, 50, 2000
        c_r, c_p = concentration_constants(np.zeros((4, 2)), delta)
        rng = np.random.default_rng(0)
        transition = rng.dirichlet(np.ones(4), size=8)
        mean_reward = rng.uniform(size=8)

        failures = 0
        for _ in range(trials):
            counts = np.stack([rng.multinomial(n, row) for row in transition])
            l1 = np.abs(counts / n - transition).sum(axis=1)
            rewards = rng.binomial(n, mean_reward) / n
            if np.any(l1 > c_p / math.sqrt(n)) or np.any(np.abs(rewards - mean_reward) > c_r / math.sqrt(n)):
                failures += 1
        assert failures / trials <= delta

    def test_reweighting_constants(self):
        C1, C2 = theorem3_constants(labeled_size=100, effective_size=400, c_p=2.0, discount=0.9)
        assert C1 == pytest.approx(0.9 * 2.0 / (0.01 * 20.0))
        assert C2 == pytest.approx(100 / (0.1 * 400))

    def test_reweighting_constants_need_data(self):
        with pytest.raises(ValueError):
            theorem3_constants(0, 100, 1.0, 0.9)


class TestLemma:
    def test_value(self):
        d = np.array([0.25, 0.75])
        expected = 0.9 * 2.0 / (0.01 * 10.0) * np.sum(d / np.sqrt(d))
        assert sampling_error_lemma(d, d, 2.0, 100, 0.9) == pytest.approx(expected)

    def test_outside_support(self):
        assert sampling_error_lemma([0.5, 0.5], [1.0, 0.0], 1.0, 10, 0.9) == math.inf


class TestBiasObjective:
    def test_sum_of_p_is_constant_with_unit_reward(self):
        d_pi = np.array([0.2, 0.3, 0.5])
        d_L = np.array([0.5, 0.25, 0.25])
        p = np.array([0.1, 0.1, 0.8])
        expected = 1.0 + 0.1 * np.sum(d_L * (d_pi / p - 1.0))
        assert reward_bias_objective(p, d_pi, d_L, 10, 100) == pytest.approx(expected)

    def test_zero_mass_on_active_pair_is_infinite(self):
        d = np.array([0.5, 0.5])
        assert reward_bias_objective(np.array([1.0, 0.0]), d, d, 10, 100) == math.inf

    @pytest.mark.parametrize("seed", range(3))
    def test_numeric_minimizer_matches_closed_form(self, seed):
        rng = np.random.default_rng(seed)
        d_pi, d_L = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
        result = minimize_reward_bias_objective(d_pi, d_L, 100, 1000, restarts=2, seed=seed)
        np.testing.assert_allclose(result.x, closed_form_bias_minimizer(d_pi, d_L), atol=1e-5)


class TestReport:
    def test_terms_are_consistent(self, dense_mdp, uds_solve):
        effective, result = uds_solve
        report = theorem1_report(dense_mdp, effective, result, delta=0.1, alpha=1.0)
        assert report.zeta_err == pytest.approx(report.term_a_reward_bias + report.term_b_sampling_error)
        assert report.term_c_policy_improvement == pytest.approx(result.divergence_value / 0.1)
        literal = report.j_true_learned >= report.j_true_behavior - report.zeta_err + report.term_c_policy_improvement
        assert report.guarantee_holds == literal
        assert report.term_b_sampling_error > 0 and not report.vacuous
        assert report.j_empirical_learned == result.empirical_return

    def test_no_improvement_term_without_conservatism(self, dense_mdp, uds_solve):
        effective, result = uds_solve
        assert theorem1_report(dense_mdp, effective, result, alpha=0.0).term_c_policy_improvement == 0.0

    def test_serialization(self, dense_mdp, uds_solve):
        report = theorem1_report(dense_mdp, *uds_solve, alpha=1.0)
        row = report.to_row()
        assert row["guarantee_holds"] in (0, 1) and row["vacuous"] == 0
        assert json.loads(report.to_json())["delta"] == 0.1

    def test_uncovered_reach_is_vacuous(self, two_state_mdp, state_zero_only):
        with pytest.warns(UserWarning):
            result = solve_conservative(state_zero_only, ConservativeConfig(alpha=0.0), 0.9, two_state_mdp.initial_dist)
        result = dataclasses.replace(result, policy=GO_TO_STATE_ONE)
        report = theorem1_report(two_state_mdp, state_zero_only, result)
        assert report.vacuous
        assert report.term_b_sampling_error == math.inf
        assert report.guarantee_holds
