"""
Seeded experiment sweeps over data compositions and sharing strategies.

A sweep runs every (composition, seed) task: build the MDP, sample the
labeled and unlabeled datasets, solve once on the labeled data alone (the
conservative Q-values and the occupancy some strategies need), then apply,
solve and bound every strategy. Tasks run in a process pool; the parent
collects results in submission order and is the only writer.

Outputs (under output_dir):
    records.csv    one row per (composition, seed, strategy)
    timings.csv    wall time per arm (kept apart so records are reproducible)
    manifest.json  config hash, canonical config, seeds, package versions
    tables/*.md, tables/*.csv, plots/*.csv as requested by the config
"""

import hashlib
import json
import math
import os
import platform
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from importlib import metadata

import numpy as np
import pandas as pd
import yaml
from tqdm import tqdm

from src.bounds import BoundReport, concentration_constants, theorem1_report, theorem3_constants
from src.data import QualitySpec, behavior_policy, sample_dataset
from src.helpers.console import console, is_quiet
from src.helpers.errors import ConfigError, CoverageWarning, EmptyDatasetError, UnknownKeyError
from src.helpers.mdp_families import build_mdp
from src.helpers.retry import retry_on_nonconvergence
from src.mdp import TabularPolicy, evaluate_return, occupancy, optimal_policy
from src.relabel import StrategyContext, StrategySpec, apply_no_sharing, apply_strategy
from src.solver import ConservativeConfig, solve_conservative

# Default sizes of the composition grid (1:100 labeled to unlabeled)
LABELED_SIZE = 100
UNLABELED_SIZE = 10_000

TABLE4_GRID = [
    {"name": "a", "labeled": {"quality": "expert", "size": LABELED_SIZE},
     "unlabeled": {"quality": "random", "size": UNLABELED_SIZE}},
    {"name": "b", "labeled": {"quality": "expert", "size": LABELED_SIZE},
     "unlabeled": {"quality": "medium", "size": UNLABELED_SIZE}},
    {"name": "c", "labeled": {"quality": "expert", "size": LABELED_SIZE},
     "unlabeled": {"quality": "expert", "size": UNLABELED_SIZE - LABELED_SIZE}},
    {"name": "d", "labeled": {"quality": "medium", "size": LABELED_SIZE},
     "unlabeled": {"quality": "random", "size": UNLABELED_SIZE}},
    {"name": "e", "labeled": {"quality": "medium", "size": LABELED_SIZE},
     "unlabeled": {"quality": "expert", "size": UNLABELED_SIZE}},
    {"name": "f", "labeled": {"quality": "random", "size": LABELED_SIZE},
     "unlabeled": {"quality": "medium", "size": UNLABELED_SIZE}},
    {"name": "g", "labeled": {"quality": "random", "size": LABELED_SIZE},
     "unlabeled": {"quality": "expert", "size": UNLABELED_SIZE}},
]

DEFAULT_STRATEGIES = ["no_sharing", "uds", "cds_uds", "sharing_all", "cds_filter"]

RECORD_KEYS = [
    "config_hash",
    "composition",
    "seed",
    "strategy",
    "mdp_family",
    "discount",
    "labeled_quality",
    "labeled_size",
    "unlabeled_quality",
    "unlabeled_size",
    "j_true",
    "j_empirical",
    "j_behavior",
    "j_optimal",
    "normalized_return",
    "effective_size",
    "shared_weight_mean",
    "coverage_min",
    "coverage_mean",
    "n_uncovered",
    "iterations",
    "converged",
]
BOUND_KEYS = [f.name for f in fields(BoundReport) if not f.name.startswith("j_")]
RECORD_COLUMNS = RECORD_KEYS + BOUND_KEYS + ["error"]


@dataclass(frozen=True)
class DataSpec:
    quality: QualitySpec
    size: int

    @classmethod
    def from_dict(cls, doc):
        size = int(doc.get("size", 1))
        if size < 1:
            raise ConfigError(f"dataset size must be >= 1, got {size}")
        try:
            quality = QualitySpec.from_dict(doc.get("quality", "random"))
        except ValueError as e:
            raise ConfigError(f"Error in dataset quality: {e}")
        return cls(quality, size)

    def to_dict(self):
        return {"quality": self.quality.to_dict(), "size": self.size}


@dataclass(frozen=True)
class Composition:
    name: str
    labeled: DataSpec
    unlabeled: DataSpec

    @classmethod
    def from_dict(cls, doc, default_name="main"):
        if "labeled" not in doc or "unlabeled" not in doc:
            raise ConfigError(f"composition '{doc.get('name', default_name)}' needs labeled and unlabeled sections")
        return cls(
            name=str(doc.get("name", default_name)),
            labeled=DataSpec.from_dict(doc["labeled"]),
            unlabeled=DataSpec.from_dict(doc["unlabeled"]),
        )

    def to_dict(self):
        return {"name": self.name, "labeled": self.labeled.to_dict(), "unlabeled": self.unlabeled.to_dict()}


@dataclass
class ExperimentConfig:
    """
    One sweep.

    mdp_spec: family, size, seed and family-specific knobs (see build_mdp)
    compositions: labeled/unlabeled pairs; a top-level labeled/unlabeled pair
        or `grid: table4` are accepted as shorthands
    strategies: StrategySpec list
    solver: ConservativeConfig
    delta: failure probability of the bound constants
    seeds: run seeds (an int N means range(N))
    sampling: {mode: iid | trajectory, reward_noise}
    """

    mdp_spec: dict
    compositions: list
    strategies: list
    solver: ConservativeConfig
    delta: float = 0.1
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "results"
    parallel: int = 1
    sampling: dict = field(default_factory=lambda: {"mode": "iid", "reward_noise": 0.0})
    tables: list = field(default_factory=list)
    plots: list = field(default_factory=list)
    save_datasets: bool = False
    name: str = "experiment"

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc or {})
        if doc.get("grid") == "table4":
            compositions = [Composition.from_dict(c) for c in TABLE4_GRID]
        elif "compositions" in doc:
            compositions = [Composition.from_dict(c, f"c{i}") for i, c in enumerate(doc["compositions"])]
        elif "labeled" in doc and "unlabeled" in doc:
            compositions = [Composition.from_dict(doc)]
        else:
            raise ConfigError("config needs `compositions`, `grid: table4` or a labeled/unlabeled pair")
        if not compositions:
            raise ConfigError("config lists no compositions")
        names = [c.name for c in compositions]
        if len(set(names)) != len(names):
            raise ConfigError(f"composition names must be unique, got {names}")

        seeds = doc.get("seeds", 1)
        seeds = list(range(int(seeds))) if isinstance(seeds, int) else [int(s) for s in seeds]
        if not seeds:
            raise ConfigError("seeds must be nonempty")

        strategies = [StrategySpec.from_dict(s) for s in doc.get("strategies", DEFAULT_STRATEGIES)]
        if not strategies:
            raise ConfigError("strategies must be nonempty")
        labels = [s.label for s in strategies]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"strategy labels must be unique (use `name`), got {labels}")

        delta = float(doc.get("delta", 0.1))
        if not 0.0 < delta < 1.0:
            raise ConfigError(f"delta must lie in (0, 1), got {delta}")
        try:
            solver = ConservativeConfig.from_dict(doc.get("solver"))
        except ValueError as e:
            raise ConfigError(f"Error in solver section: {e}")

        sampling = {"mode": "iid", "reward_noise": 0.0}
        sampling.update(doc.get("sampling") or {})
        if sampling["mode"] not in ("iid", "trajectory"):
            raise ConfigError(f"unknown sampling mode '{sampling['mode']}' (iid | trajectory)")

        return cls(
            mdp_spec=dict(doc.get("mdp") or {"family": "gridworld"}),
            compositions=compositions,
            strategies=strategies,
            solver=solver,
            delta=delta,
            seeds=seeds,
            output_dir=str(doc.get("output_dir", os.getenv("UDSLAB_OUTPUT_DIR", "results"))),
            parallel=int(doc.get("parallel", os.getenv("UDSLAB_PARALLEL", 1))),
            sampling=sampling,
            tables=list(doc.get("tables") or []),
            plots=list(doc.get("plots") or []),
            save_datasets=bool(doc.get("save_datasets", False)),
            name=str(doc.get("name", "experiment")),
        )

    def to_dict(self):
        return {
            "name": self.name,
            "mdp": dict(self.mdp_spec),
            "compositions": [c.to_dict() for c in self.compositions],
            "strategies": [s.to_dict() for s in self.strategies],
            "solver": self.solver.to_dict(),
            "delta": self.delta,
            "seeds": list(self.seeds),
            "sampling": dict(self.sampling),
            "tables": list(self.tables),
            "plots": list(self.plots),
            "save_datasets": self.save_datasets,
            "output_dir": self.output_dir,
            "parallel": self.parallel,
        }

    def canonical(self):
        """Config content that determines results (output location and pool size excluded)."""
        doc = self.to_dict()
        for key in ("output_dir", "parallel", "tables", "plots", "save_datasets"):
            doc.pop(key)
        return doc

    def config_hash(self):
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def load_config(path):
    """Read an experiment config from YAML or JSON (by file extension)."""
    try:
        with open(path, "r") as file:
            if str(path).lower().endswith(".json"):
                doc = json.load(file)
            else:
                doc = yaml.safe_load(file)
    except FileNotFoundError:
        raise ConfigError(f"Could not find config file {path}.")
    except (yaml.YAMLError, json.JSONDecodeError) as e:
        raise ConfigError(f"Error reading config {path}: {e}")
    return ExperimentConfig.from_dict(doc)


@dataclass
class RunRecord:
    """One (composition, seed, strategy) arm; metrics are NaN when `error` is set."""

    values: dict
    wall_time: float = 0.0

    @property
    def failed(self):
        return bool(self.values.get("error"))

    def to_row(self):
        return {key: self.values.get(key, math.nan) for key in RECORD_COLUMNS}


def _task_seeds(seed, composition_index):
    """(labeled, unlabeled, reweight) seeds; the labeled seed ignores the composition."""
    streams = ([seed, 0], [seed, 1, composition_index], [seed, 2, composition_index])
    return [int(np.random.SeedSequence([int(v) for v in key]).generate_state(1)[0]) for key in streams]


def _base_values(config, composition, seed):
    return {
        "config_hash": config.config_hash(),
        "composition": composition.name,
        "seed": seed,
        "mdp_family": config.mdp_spec.get("family", "gridworld"),
        "discount": float(config.mdp_spec.get("discount", math.nan)),
        "labeled_quality": composition.labeled.quality.name,
        "labeled_size": composition.labeled.size,
        "unlabeled_quality": composition.unlabeled.quality.name,
        "unlabeled_size": composition.unlabeled.size,
        "error": "",
    }


def _solve(effective, config, mdp):
    solver = config.solver
    return retry_on_nonconvergence(
        lambda cap: solve_conservative(effective, solver.with_max_iters(cap), mdp.discount, mdp.initial_dist),
        max_iters=solver.max_iters,
    )


def _sample(config, composition, mdp, seeds, output_dir=None, seed=0):
    mode = config.sampling.get("mode", "iid")
    noise = float(config.sampling.get("reward_noise", 0.0))
    specs = (("labeled", composition.labeled, True), ("unlabeled", composition.unlabeled, False))
    datasets = []
    for (role, spec, labeled), data_seed in zip(specs, seeds):
        datasets.append(sample_dataset(
            mdp,
            behavior_policy(mdp, spec.quality),
            spec.size,
            data_seed,
            labeled=labeled,
            mode=mode,
            reward_noise=noise if labeled else 0.0,
            label=f"{spec.quality.name}/{spec.size}",
        ))
        if output_dir:
            stem = os.path.join(output_dir, "datasets", f"{composition.name}_seed{seed}_{role}")
            os.makedirs(os.path.dirname(stem), exist_ok=True)
            datasets[-1].to_csv(f"{stem}.csv")
            datasets[-1].write_manifest(f"{stem}.json")
    return datasets


def _failed_task(config, composition, seed, message):
    base = _base_values(config, composition, seed)
    return [RunRecord({**base, "strategy": spec.label, "error": message}) for spec in config.strategies]


def run_task(config_doc, composition_index, seed):
    """
    Run every strategy for one (composition, seed); never raises.

    Returns:
        list of RunRecord, in strategy order
    """
    warnings.simplefilter("ignore", CoverageWarning)
    try:
        config = ExperimentConfig.from_dict(config_doc)
        composition = config.compositions[composition_index]
    except Exception as e:
        return [RunRecord({"seed": seed, "error": f"setup failed: {e}"})]

    base = _base_values(config, composition, seed)
    try:
        mdp = build_mdp(config.mdp_spec, seed)
        base["discount"] = mdp.discount
        labeled_seed, unlabeled_seed, reweight_seed = _task_seeds(seed, composition_index)
        labeled, unlabeled = _sample(
            config, composition, mdp, (labeled_seed, unlabeled_seed),
            output_dir=config.output_dir if config.save_datasets else None, seed=seed,
        )
        j_optimal = evaluate_return(mdp, optimal_policy(mdp))
        j_random = evaluate_return(mdp, TabularPolicy.uniform(mdp.num_states, mdp.num_actions))

        # labeled-only solve: conservative Q-values and occupancy for the sharing rules
        base_result = _solve(apply_no_sharing(labeled), config, mdp)
        _, c_p = concentration_constants(labeled.counts_sa, config.delta)
        context = StrategyContext(
            oracle=mdp,
            conservative_q=base_result.conservative_q,
            policy_occupancy=occupancy(base_result.empirical_mdp, base_result.policy),
            reweight_constants=theorem3_constants(len(labeled), len(labeled) + len(unlabeled), c_p, mdp.discount),
            seed=reweight_seed,
        )
    except Exception as e:
        return _failed_task(config, composition, seed, f"setup failed: {e}")

    records = []
    for spec in config.strategies:
        started = time.perf_counter()
        values = {**base, "strategy": spec.label}
        try:
            effective = apply_strategy(spec, labeled, unlabeled, context)
            result = _solve(effective, config, mdp)
            report = theorem1_report(
                mdp, effective, result, config.delta, config.solver.alpha, config.solver.divergence
            )
            spread = j_optimal - j_random
            shared = effective.shared_weights
            coverage = effective.dataset.coverage()
            values.update({
                "j_true": report.j_true_learned,
                "j_empirical": report.j_empirical_learned,
                "j_behavior": report.j_true_behavior,
                "j_optimal": j_optimal,
                "normalized_return": 100.0 * (report.j_true_learned - j_random) / spread if spread > 0 else math.nan,
                "effective_size": effective.size,
                "shared_weight_mean": float(shared.mean()) if shared.size else math.nan,
                "coverage_min": coverage["min_count"],
                "coverage_mean": coverage["mean_count"],
                "n_uncovered": len(result.empirical_mdp.uncovered),
                "iterations": result.iterations,
                "converged": int(result.converged),
            })
            values.update({k: v for k, v in report.to_row().items() if k in BOUND_KEYS})
        except Exception as e:
            values["error"] = f"{type(e).__name__}: {e}"
        records.append(RunRecord(values, wall_time=time.perf_counter() - started))
    return records


def run_experiment(config, progress=True):
    """
    Run the whole sweep.

    Identical configs give identical records: all randomness flows from the
    run seeds through numpy SeedSequence children, and results are collected
    in submission order.

    Returns:
        list of RunRecord ordered by (composition, seed, strategy)
    """
    doc = config.to_dict()
    tasks = [(ci, seed) for ci in range(len(config.compositions)) for seed in config.seeds]
    show = progress and not is_quiet()
    records = []
    if config.parallel > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=config.parallel) as pool:
            futures = [pool.submit(run_task, doc, ci, seed) for ci, seed in tasks]
            for (ci, seed), future in tqdm(zip(tasks, futures), total=len(tasks), desc="Sweep", unit="task",
                                           disable=not show):
                try:
                    records.extend(future.result())
                except Exception as e:
                    # a dead worker or an unpicklable result fails only this task's arms
                    message = f"worker failed: {type(e).__name__}: {e}"
                    records.extend(_failed_task(config, config.compositions[ci], seed, message))
    else:
        for ci, seed in tqdm(tasks, desc="Sweep", unit="task", disable=not show):
            records.extend(run_task(doc, ci, seed))
    return records


def records_frame(records):
    """DataFrame view of records (a DataFrame or a list of RunRecord / dict rows)."""
    if isinstance(records, pd.DataFrame):
        return records
    rows = [r.to_row() if isinstance(r, RunRecord) else dict(r) for r in records]
    return pd.DataFrame(rows, columns=RECORD_COLUMNS if rows and isinstance(records[0], RunRecord) else None)


def load_records(path):
    frame = pd.read_csv(path, keep_default_na=True)
    if "error" in frame.columns:
        frame["error"] = frame["error"].fillna("")
    return frame


def _check_keys(frame, *keys):
    for key in keys:
        if key not in frame.columns:
            raise UnknownKeyError(key, frame.columns)


def _summarize(frame, keys, metric):
    valid = frame[frame[metric].notna()]
    if valid.empty:
        raise EmptyDatasetError(f"no records with a value for '{metric}'")
    stats = valid.groupby(keys, sort=True)[metric].agg(["mean", "std", "count"]).reset_index()
    stats = stats.rename(columns={"count": "n"})
    # single-seed cells get CI width 0 and are marked n/a in tables
    stats["ci"] = np.where(stats["n"] > 1, 1.96 * stats["std"].fillna(0.0) / np.sqrt(stats["n"]), 0.0)
    return stats


@dataclass
class TableResult:
    markdown: str
    frame: pd.DataFrame

    def write(self, stem):
        os.makedirs(os.path.dirname(stem) or ".", exist_ok=True)
        with open(f"{stem}.md", "w") as f:
            f.write(self.markdown + "\n")
        self.frame.to_csv(f"{stem}.csv", index=False)


def emit_table(records, group_by="composition", metric="j_true", columns="strategy"):
    """
    Mean ± 95% CI (1.96·std/√n over seeds) per (group_by, columns) cell.

    Single-seed cells show the mean with the CI marked n/a. Rows and columns
    are sorted.

    Raises:
        EmptyDatasetError: no records (or no values for the metric).
        UnknownKeyError: a key is not a record column.
    """
    frame = records_frame(records)
    if frame.empty:
        raise EmptyDatasetError("no records to tabulate")
    _check_keys(frame, group_by, columns, metric)
    stats = _summarize(frame, [group_by, columns], metric)
    stats["cell"] = [
        f"{m:.3f} ± {c:.3f}" if n > 1 else f"{m:.3f} (CI n/a)"
        for m, c, n in zip(stats["mean"], stats["ci"], stats["n"])
    ]
    table = stats.pivot(index=group_by, columns=columns, values="cell").sort_index().sort_index(axis=1)
    markdown = table.fillna("-").to_markdown()
    return TableResult(markdown, stats[[group_by, columns, "mean", "ci", "n"]])


def emit_plotdata(records, x_axis, series="strategy", metric="j_true"):
    """
    Long-format plot data: x, series, mean, ci_lo, ci_hi, n.

    Raises:
        UnknownKeyError: x_axis, series or metric is not a record column.
    """
    frame = records_frame(records)
    _check_keys(frame, x_axis, series, metric)
    if frame.empty:
        raise EmptyDatasetError("no records to summarize")
    stats = _summarize(frame, [series, x_axis], metric)
    return pd.DataFrame({
        "x": stats[x_axis],
        "series": stats[series],
        "mean": stats["mean"],
        "ci_lo": stats["mean"] - stats["ci"],
        "ci_hi": stats["mean"] + stats["ci"],
        "n": stats["n"],
    })


def _versions():
    versions = {"python": platform.python_version()}
    for package in ("numpy", "scipy", "pandas"):
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = "unknown"
    return versions


def write_outputs(config, records, output_dir=None):
    """
    Write records.csv, timings.csv, manifest.json and the configured tables/plots.

    Returns:
        dict: name -> path of every file written
    """
    output_dir = output_dir or config.output_dir
    os.makedirs(output_dir, exist_ok=True)
    written = {}

    frame = records_frame(records)
    written["records"] = os.path.join(output_dir, "records.csv")
    frame.to_csv(written["records"], index=False)

    timings = pd.DataFrame([
        {"composition": r.values["composition"], "seed": r.values["seed"],
         "strategy": r.values["strategy"], "wall_time": r.wall_time}
        for r in records
    ])
    written["timings"] = os.path.join(output_dir, "timings.csv")
    timings.to_csv(written["timings"], index=False)

    manifest = {
        "name": config.name,
        "config_hash": config.config_hash(),
        "config": config.canonical(),
        "seeds": list(config.seeds),
        "records": len(records),
        "failures": sum(r.failed for r in records),
        "versions": _versions(),
    }
    written["manifest"] = os.path.join(output_dir, "manifest.json")
    with open(written["manifest"], "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)

    for spec in config.tables:
        group_by = spec.get("group_by", "composition")
        metric = spec.get("metric", "j_true")
        columns = spec.get("columns", "strategy")
        stem = os.path.join(output_dir, "tables", spec.get("name", f"{metric}_by_{group_by}"))
        emit_table(frame, group_by, metric, columns).write(stem)
        written[f"table:{stem}"] = f"{stem}.md"

    for spec in config.plots:
        x_axis = spec["x"]
        series = spec.get("series", "strategy")
        metric = spec.get("metric", "j_true")
        path = os.path.join(output_dir, "plots", spec.get("name", f"{metric}_vs_{x_axis}") + ".csv")
        os.makedirs(os.path.dirname(path), exist_ok=True)
        emit_plotdata(frame, x_axis, series, metric).to_csv(path, index=False)
        written[f"plot:{path}"] = path
    return written


def run_and_write(config, progress=True):
    """CLI driver: run the sweep and write every output, reporting steps on the console."""
    total = 2
    console.print(f"Running {len(config.compositions)} composition(s) x {len(config.seeds)} seed(s) "
                  f"x {len(config.strategies)} strategy(ies)... (1/{total})", style="bold")
    records = run_experiment(config, progress=progress)
    failures = sum(r.failed for r in records)
    if failures:
        console.print(f"{failures} arm(s) failed; see the error column of records.csv", style="bold yellow")
    console.print(f"Writing outputs to {config.output_dir}... ({total}/{total})", style="bold")
    with console.status("[bold green]Writing records, tables and plot data..."):
        written = write_outputs(config, records)
    return records, written
