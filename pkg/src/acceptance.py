"""
Acceptance suites for the bounds, the reweighting optimum, the solver and the
data-composition orderings.

Suites
------
theorem1  guarantee validity over random MDPs, horizon tradeoff of term (b),
          solver correctness (exact recovery, large-α limit, monotone objective)
theorem2  numeric reward-bias minimizer against the closed form
theorem3  optimal reweighting against a sampled grid, KKT residual
cases     same-policy sign of term (a), reward-error signs of UDS vs a
          reward predictor, composition orderings, CDS+UDS vs UDS over the
          seven-case grid, unlabeled-size ablation

Every check reads its parameters from acceptance_config.yaml (missing keys
fall back to DEFAULTS) and returns CheckResult rows; a check that raises is
reported as failed with the error, the other checks still run.
"""

import copy
import itertools
import math
import os
import warnings
from dataclasses import asdict, dataclass

import numpy as np
import yaml

from src.bounds import (
    effective_reward_error,
    predictor_reward_error,
    minimize_reward_bias_objective,
    theorem1_report,
    uds_reward_error,
)
from src.data import behavior_policy, exhaustive_dataset, sample_dataset
from src.harness import ExperimentConfig, records_frame, run_experiment
from src.helpers.console import console
from src.helpers.errors import ConfigError, ConvergenceError, CoverageWarning
from src.helpers.mdp_families import chain, gridworld, random_dense
from src.mdp import evaluate_return, optimal_policy
from src.relabel import (
    apply_no_sharing,
    apply_uds,
    closed_form_bias_minimizer,
    fit_reward_predictor,
    optimal_reweight,
)
from src.solver import ConservativeConfig, solve_conservative

SUITES = ("theorem1", "theorem2", "theorem3", "cases")

DEFAULTS = {
    "delta": 0.1,
    "parallel": 1,
    "solver": {"alpha": 1.0, "divergence": "cql", "max_iters": 1000, "tol": 1e-8},
    "guarantee": {
        "seeds": 200, "num_states": 6, "num_actions": 3, "discount": 0.9,
        "labeled": {"quality": "expert", "size": 100},
        "unlabeled": {"quality": "random", "size": 10_000},
        "rate": 0.9,
    },
    "horizon": {
        "seeds": 30, "num_states": 6, "num_actions": 3, "discounts": [0.9, 0.95, 0.99],
        "labeled": {"quality": "medium", "size": 10},
        "unlabeled_quality": "random",
    },
    "solver_checks": {"per_pair": 10, "seeds": 10, "large_alpha": 1.0e4, "tv_tol": 1e-3, "j_tol": 1e-8},
    "bias_minimizer": {"instances": 50, "max_points": 20, "l1_tol": 1e-4, "seed": 0},
    "reweight": {"instances": 20, "max_points": 12, "lattice": 200,
                 "objective_tol": 1e-3, "kkt_tol": 1e-5, "seed": 0},
    "same_policy": {
        "seeds": 50, "num_states": 6, "num_actions": 3, "discount": 0.9, "quality": "medium",
        "labeled_size": 100, "unlabeled_size": 10_000, "rate": 0.9,
    },
    "reward_error": {
        "instances": 50, "num_states": 6, "num_actions": 3,
        "labeled_size": 100, "unlabeled_size": 1000, "rate": 0.8,
    },
    # sweep sections carry their own solver; UDS scales the sparse goal reward by f(s, a)
    "compositions": {
        "seeds": 20, "rate": 0.7, "labeled_size": 100, "unlabeled_size": 10_000,
        "mdp": {"family": "gridworld", "size": 5, "slip": 0.1, "discount": 0.9},
        "solver": {"alpha": 0.03},
    },
    "grid": {
        "seeds": 20, "min_cases": 5,
        "mdp": {"family": "gridworld", "size": 5, "slip": 0.1, "discount": 0.9},
        "solver": {"alpha": 0.03},
        "strategies": ["uds", {"kind": "cds_uds", "weight_mode": "soft"}],
    },
    "ablation": {
        "seeds": 20, "rate": 0.7, "labeled": {"quality": "expert", "size": 100},
        "unlabeled_quality": "random", "unlabeled_sizes": [100, 1000, 10_000],
        "mdp": {"family": "gridworld", "size": 5, "slip": 0.1, "discount": 0.9},
        "solver": {"alpha": 0.01},
    },
}


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    observed: float
    required: str
    detail: str = ""

    def to_dict(self):
        return asdict(self)


def load_acceptance_config(path=None):
    """DEFAULTS overlaid with acceptance_config.yaml (one level of nesting is merged)."""
    params = copy.deepcopy(DEFAULTS)
    if path is None or not os.path.exists(path):
        return params
    try:
        with open(path, "r") as file:
            doc = yaml.safe_load(file) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"Error reading acceptance config {path}: {e}")
    for key, value in doc.items():
        if isinstance(value, dict) and isinstance(params.get(key), dict):
            params[key].update(value)
        else:
            params[key] = value
    return params


def _child_seeds(seed, count):
    return [int(s) for s in np.random.SeedSequence(int(seed)).generate_state(count)]


def _binomial_floor(rate, trials):
    return rate - 2.0 * math.sqrt(rate * (1.0 - rate) / trials)


def _sample_pair(mdp, labeled, unlabeled, seed):
    """(labeled, unlabeled) datasets from {quality, size} sections."""
    labeled_seed, unlabeled_seed = _child_seeds(seed, 2)
    d_L = sample_dataset(mdp, behavior_policy(mdp, labeled["quality"]), labeled["size"], labeled_seed, labeled=True)
    d_U = sample_dataset(mdp, behavior_policy(mdp, unlabeled["quality"]), unlabeled["size"], unlabeled_seed,
                         labeled=False)
    return d_L, d_U


def _solve(effective, mdp, solver):
    return solve_conservative(effective, solver, mdp.discount, mdp.initial_dist)


# theorem1 suite

def check_guarantee(params):
    p = params["guarantee"]
    solver = ConservativeConfig.from_dict(params["solver"])
    seeds = int(p["seeds"])
    holds = vacuous = 0
    for seed in range(seeds):
        mdp = random_dense(p["num_states"], p["num_actions"], seed=seed, discount=p["discount"])
        labeled, unlabeled = _sample_pair(mdp, p["labeled"], p["unlabeled"], seed)
        effective = apply_uds(labeled, unlabeled)
        result = _solve(effective, mdp, solver)
        report = theorem1_report(mdp, effective, result, params["delta"], solver.alpha, solver.divergence)
        holds += report.guarantee_holds
        vacuous += report.vacuous
    rate = holds / seeds
    floor = _binomial_floor(p["rate"], seeds)
    return CheckResult("theorem1", "guarantee holds", rate >= floor, rate, f">= {floor:.3f}",
                       f"{holds}/{seeds} seeds, {vacuous} vacuous")


def check_horizon(params):
    p = params["horizon"]
    solver = ConservativeConfig.from_dict(params["solver"])
    n_L = int(p["labeled"]["size"])
    wins = total = vacuous = 0
    for discount in p["discounts"]:
        horizon = 1.0 / (1.0 - discount)
        unlabeled_size = max(1, math.ceil(round(horizon * horizon, 6) * n_L) - n_L)
        unlabeled = {"quality": p["unlabeled_quality"], "size": unlabeled_size}
        for seed in range(int(p["seeds"])):
            mdp = random_dense(p["num_states"], p["num_actions"], seed=seed, discount=discount)
            d_L, d_U = _sample_pair(mdp, p["labeled"], unlabeled, seed)
            terms = []
            for effective in (apply_no_sharing(d_L), apply_uds(d_L, d_U)):
                result = _solve(effective, mdp, solver)
                report = theorem1_report(mdp, effective, result, params["delta"], solver.alpha, solver.divergence)
                terms.append(report.term_b_sampling_error)
            total += 1
            wins += terms[1] < terms[0]
            vacuous += math.isinf(terms[0])
    return CheckResult("theorem1", "sampling error shrinks with shared data", wins == total, wins / total,
                       "== 1.0", f"{wins}/{total} comparisons, {vacuous} against a vacuous labeled-only bound")


def check_solver(params):
    p = params["solver_checks"]
    per_pair = int(p["per_pair"])
    exact = ConservativeConfig(alpha=0.0, max_iters=10_000)
    traces = []

    worst_gap = 0.0
    for mdp in (chain(6, slip=0.1, discount=0.9), chain(8, slip=0.2, discount=0.95), gridworld(4, slip=0.3)):
        effective = apply_no_sharing(exhaustive_dataset(mdp, per_pair))
        result = _solve(effective, mdp, exact)
        traces.append(result.objective_trace)
        worst_gap = max(worst_gap, abs(evaluate_return(mdp, result.policy) - evaluate_return(mdp, optimal_policy(mdp))))

    worst_tv = 0.0
    large = ConservativeConfig(alpha=float(p["large_alpha"]), max_iters=10_000)
    for seed in range(int(p["seeds"])):
        mdp = random_dense(6, 3, seed=seed)
        d_L, d_U = _sample_pair(mdp, {"quality": "medium", "size": 100}, {"quality": "random", "size": 1000}, seed)
        effective = apply_uds(d_L, d_U)
        result = _solve(effective, mdp, large)
        traces.append(result.objective_trace)
        worst_tv = max(worst_tv, float(result.policy.total_variation(effective.behavior).max()))
        for divergence, alpha in (("cql", 1.0), ("kl", 0.5)):
            config = ConservativeConfig(alpha=alpha, divergence=divergence)
            traces.append(_solve(effective, mdp, config).objective_trace)

    drops = 0
    for trace in traces:
        trace = np.asarray(trace)
        slack = 1e-9 * np.maximum(1.0, np.abs(trace[:-1]))
        drops += int(np.any(np.diff(trace) < -slack))
    return [
        CheckResult("theorem1", "alpha=0 recovers the optimal policy", worst_gap <= p["j_tol"], worst_gap,
                    f"<= {p['j_tol']:g}", "exhaustive data on chain and gridworld"),
        CheckResult("theorem1", "large alpha recovers the behavior policy", worst_tv <= p["tv_tol"], worst_tv,
                    f"<= {p['tv_tol']:g}", f"alpha = {p['large_alpha']:g}, max TV over states"),
        CheckResult("theorem1", "objective is monotone", drops == 0, drops, "== 0", f"{len(traces)} traces"),
    ]


# theorem2 suite

def check_bias_minimizer(params):
    p = params["bias_minimizer"]
    rng = np.random.default_rng(p["seed"])
    worst = 0.0
    stalled = []
    instances = int(p["instances"])
    for i in range(instances):
        n = int(rng.integers(2, int(p["max_points"]) + 1))
        d_pi = rng.dirichlet(np.ones(n))
        d_L = rng.dirichlet(np.ones(n))
        labeled_size = int(rng.integers(10, 1000))
        effective_size = labeled_size * float(rng.uniform(1.0, 100.0))
        try:
            x = minimize_reward_bias_objective(d_pi, d_L, labeled_size, effective_size, seed=i).x
        except ConvergenceError:
            stalled.append(i)
            continue
        worst = max(worst, float(np.abs(x - closed_form_bias_minimizer(d_pi, d_L)).sum()))
    passed = not stalled and worst <= p["l1_tol"]
    return CheckResult("theorem2", "numeric minimizer matches the closed form", passed, worst,
                       f"<= {p['l1_tol']:g} (L1)", _instance_detail(instances, stalled))


def _instance_detail(instances, stalled):
    if not stalled:
        return f"{instances} instances"
    return f"{instances} instances, {len(stalled)} did not converge (instances {stalled})"


# theorem3 suite

def _lattice(m, k):
    """Strictly positive points of the k-simplex with resolution 1/m."""
    points = [c for c in itertools.product(range(1, m), repeat=k - 1) if sum(c) < m]
    return np.array([list(c) + [m - sum(c)] for c in points], dtype=float) / m


def _grid_minimum(center, d_pi, d_L, C1, C2, m):
    """
    Smallest reweighting objective over a 1/m lattice.

    For up to three points the lattice covers the whole simplex. Otherwise every
    3-point marginal slice through `center` is searched: the other coordinates
    stay at `center` and the three free ones share the mass they hold there.
    """
    def terms(q, idx):
        return C1 * d_pi[idx] / np.sqrt(q) + C2 * d_L[idx] * d_pi[idx] / q

    n = len(center)
    if n <= 3:
        grid = _lattice(m, n)
        return float(terms(grid, np.arange(n)).sum(axis=1).min())
    fractions = _lattice(m, 3)
    fixed = terms(center, np.arange(n))
    total = fixed.sum()
    best = math.inf
    for idx in itertools.combinations(range(n), 3):
        idx = list(idx)
        q = fractions * center[idx].sum()
        values = total - fixed[idx].sum() + terms(q, idx).sum(axis=1)
        best = min(best, float(values.min()))
    return best


def check_reweight(params):
    p = params["reweight"]
    rng = np.random.default_rng(p["seed"])
    worst_gap = worst_kkt = 0.0
    stalled = []
    instances = int(p["instances"])
    for i in range(instances):
        n = int(rng.integers(2, int(p["max_points"]) + 1))
        d_pi = rng.dirichlet(np.ones(n))
        d_L = rng.dirichlet(np.ones(n))
        C1, C2 = (float(c) for c in rng.uniform(0.1, 10.0, size=2))
        try:
            result = optimal_reweight(d_pi, d_L, C1, C2, seed=i)
        except ConvergenceError:
            stalled.append(i)
            continue
        best = _grid_minimum(result.p.ravel(), d_pi, d_L, C1, C2, int(p["lattice"]))
        worst_gap = max(worst_gap, (result.objective - best) / max(1.0, abs(best)))
        worst_kkt = max(worst_kkt, float(result.kkt_residual))
    detail = _instance_detail(instances, stalled)
    return [
        CheckResult("theorem3", "reweighting optimum beats the grid", not stalled and worst_gap <= p["objective_tol"],
                    worst_gap, f"<= {p['objective_tol']:g}", detail),
        CheckResult("theorem3", "reweighting KKT residual", not stalled and worst_kkt <= p["kkt_tol"], worst_kkt,
                    f"<= {p['kkt_tol']:g}", detail),
    ]


# cases suite

def check_same_policy_sign(params):
    p = params["same_policy"]
    solver = ConservativeConfig.from_dict(params["solver"])
    seeds = int(p["seeds"])
    negative = 0
    for seed in range(seeds):
        mdp = random_dense(p["num_states"], p["num_actions"], seed=seed, discount=p["discount"])
        labeled, unlabeled = _sample_pair(
            mdp, {"quality": p["quality"], "size": p["labeled_size"]},
            {"quality": p["quality"], "size": p["unlabeled_size"]}, seed,
        )
        effective = apply_uds(labeled, unlabeled)
        result = _solve(effective, mdp, solver)
        report = theorem1_report(mdp, effective, result, params["delta"], solver.alpha, solver.divergence)
        negative += report.term_a_reward_bias <= 1e-12
    rate = negative / seeds
    return CheckResult("cases", "reward bias is nonpositive for a shared behavior policy", rate >= p["rate"], rate,
                       f">= {p['rate']:g}", f"{negative}/{seeds} seeds")


def check_reward_error_signs(params):
    p = params["reward_error"]
    instances = int(p["instances"])
    uds_negative = predictor_negative = 0
    for seed in range(instances):
        mdp = random_dense(p["num_states"], p["num_actions"], seed=seed)
        labeled, unlabeled = _sample_pair(
            mdp, {"quality": "expert", "size": p["labeled_size"]},
            {"quality": "random", "size": p["unlabeled_size"]}, seed,
        )
        effective = apply_uds(labeled, unlabeled)
        uds_error = uds_reward_error(effective.f_table, mdp.reward)
        uds_negative += bool(np.any(uds_error < -1e-12))
        uds_negative += bool(np.any(effective_reward_error(effective, mdp.reward) < -1e-12))
        predictor_error = predictor_reward_error(mdp.reward, fit_reward_predictor(labeled))
        shared = unlabeled.counts_sa > 0
        predictor_negative += bool(np.any(predictor_error[shared] < -1e-9))
    rate = predictor_negative / instances
    return [
        CheckResult("cases", "UDS reward error is nonnegative", uds_negative == 0, uds_negative, "== 0",
                    f"{instances} instances"),
        CheckResult("cases", "predictor reward error has negative entries", rate >= p["rate"], rate,
                    f">= {p['rate']:g}", f"{predictor_negative}/{instances} instances"),
    ]


def _sweep(params, section, compositions, strategies):
    """Pivot of j_true by (composition, seed) x strategy; a section's `solver` overrides the shared one."""
    doc = {
        "name": f"acceptance-{section}",
        "mdp": params[section]["mdp"],
        "strategies": strategies,
        "solver": {**params["solver"], **(params[section].get("solver") or {})},
        "delta": params["delta"],
        "seeds": int(params[section]["seeds"]),
        "parallel": int(params.get("parallel", 1)),
    }
    if compositions == "table4":
        doc["grid"] = "table4"
    else:
        doc["compositions"] = compositions
    frame = records_frame(run_experiment(ExperimentConfig.from_dict(doc), progress=False))
    failed = frame[frame["error"].astype(str) != ""]
    if not failed.empty:
        raise RuntimeError(f"{len(failed)} sweep arm(s) failed: {failed['error'].iloc[0]}")
    return frame.pivot_table(index=["composition", "seed"], columns="strategy", values="j_true")


def check_composition_orderings(params):
    p = params["compositions"]
    scenarios = (
        ("expert+random", "expert", "random", "greater"),
        ("medium+random", "medium", "random", "not_greater"),
        ("random+expert", "random", "expert", "greater"),
    )
    compositions = [
        {"name": name, "labeled": {"quality": lab, "size": p["labeled_size"]},
         "unlabeled": {"quality": unl, "size": p["unlabeled_size"]}}
        for name, lab, unl, _ in scenarios
    ]
    table = _sweep(params, "compositions", compositions, ["no_sharing", "uds"])
    results = []
    for name, _, _, direction in scenarios:
        rows = table.loc[name]
        if direction == "greater":
            hits = rows["uds"] > rows["no_sharing"]
            claim = "J(UDS) > J(NoSharing)"
        else:
            hits = rows["uds"] <= rows["no_sharing"]
            claim = "J(UDS) <= J(NoSharing)"
        rate = float(hits.mean())
        results.append(CheckResult("cases", f"{name}: {claim}", rate >= p["rate"], rate, f">= {p['rate']:g}",
                                   f"{int(hits.sum())}/{len(hits)} seeds"))
    return results


def check_grid_dominance(params):
    p = params["grid"]
    table = _sweep(params, "grid", "table4", p.get("strategies", ["uds", "cds_uds"]))
    means = table.groupby(level="composition").mean()
    wins = int((means["cds_uds"] >= means["uds"] - 1e-12).sum())
    return CheckResult("cases", "CDS+UDS matches or beats UDS across the grid", wins >= p["min_cases"], wins,
                       f">= {p['min_cases']} of {len(means)}", ", ".join(sorted(means.index)))


def check_unlabeled_ablation(params):
    p = params["ablation"]
    sizes = [int(s) for s in p["unlabeled_sizes"]]
    compositions = [
        {"name": f"unlabeled={size}", "labeled": p["labeled"],
         "unlabeled": {"quality": p["unlabeled_quality"], "size": size}}
        for size in sizes
    ]
    table = _sweep(params, "ablation", compositions, ["no_sharing", "uds"])
    gap = (table["uds"] - table["no_sharing"]).unstack(level="composition")
    gap = gap[[f"unlabeled={size}" for size in sizes]].to_numpy()
    monotone = np.all(np.diff(gap, axis=1) >= -1e-9, axis=1)
    rate = float(monotone.mean())
    return CheckResult("cases", "UDS gain grows with unlabeled size", rate >= p["rate"], rate, f">= {p['rate']:g}",
                       f"{int(monotone.sum())}/{len(monotone)} seeds over sizes {sizes}")


SUITE_CHECKS = {
    "theorem1": (check_guarantee, check_horizon, check_solver),
    "theorem2": (check_bias_minimizer,),
    "theorem3": (check_reweight,),
    "cases": (check_same_policy_sign, check_reward_error_signs, check_composition_orderings,
              check_grid_dominance, check_unlabeled_ablation),
}


def run_suite(suite, params):
    """
    Run every check of one suite.

    Returns:
        list of CheckResult
    """
    if suite not in SUITE_CHECKS:
        raise ConfigError(f"unknown suite '{suite}' ({' | '.join(SUITES)})")
    results = []
    checks = SUITE_CHECKS[suite]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CoverageWarning)
        for i, check in enumerate(checks, start=1):
            name = check.__name__.removeprefix("check_").replace("_", " ")
            console.print(f"Checking {name}... ({i}/{len(checks)})")
            try:
                outcome = check(params)
            except Exception as e:
                outcome = CheckResult(suite, name, False, math.nan, "-", f"Error during check: {e}")
            results.extend(outcome if isinstance(outcome, list) else [outcome])
    return results
