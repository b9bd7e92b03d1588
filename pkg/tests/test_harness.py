import json
import math
from concurrent.futures import Future
from concurrent.futures.process import BrokenProcessPool

import pandas as pd
import pytest

import src.harness as harness
from src.harness import (
    RECORD_COLUMNS,
    ExperimentConfig,
    emit_plotdata,
    emit_table,
    load_config,
    load_records,
    run_experiment,
    write_outputs,
)
from src.helpers.errors import ConfigError, EmptyDatasetError, UnknownKeyError


def small_doc(**overrides):
    doc = {
        "name": "small",
        "mdp": {"family": "chain", "size": 4, "discount": 0.9},
        "labeled": {"quality": "expert", "size": 30},
        "unlabeled": {"quality": "random", "size": 200},
        "strategies": ["uds"],
        "seeds": [0],
        "solver": {"alpha": 1.0},
    }
    doc.update(overrides)
    return doc


def rows(values, composition="a", strategy="uds"):
    return [
        {"composition": composition, "strategy": strategy, "seed": i, "j_true": v}
        for i, v in enumerate(values)
    ]


class TestExperimentConfig:
    def test_single_pair_shorthand(self):
        config = ExperimentConfig.from_dict(small_doc())
        assert [c.name for c in config.compositions] == ["main"]
        assert config.compositions[0].labeled.size == 30

    def test_grid_shorthand(self):
        config = ExperimentConfig.from_dict({"grid": "table4"})
        assert [c.name for c in config.compositions] == list("abcdefg")
        assert config.compositions[2].unlabeled.size == 9900
        assert [s.kind for s in config.strategies] == harness.DEFAULT_STRATEGIES

    def test_integer_seeds(self):
        assert ExperimentConfig.from_dict(small_doc(seeds=3)).seeds == [0, 1, 2]

    def test_environment_defaults(self, monkeypatch):
        monkeypatch.setenv("UDSLAB_OUTPUT_DIR", "elsewhere")
        monkeypatch.setenv("UDSLAB_PARALLEL", "3")
        config = ExperimentConfig.from_dict(small_doc())
        assert config.output_dir == "elsewhere" and config.parallel == 3

    @pytest.mark.parametrize(
        "overrides",
        [
            {"seeds": []},
            {"strategies": ["uds", "uds"]},
            {"delta": 1.0},
            {"solver": {"alpha": -1.0}},
            {"sampling": {"mode": "episodic"}},
            {"compositions": []},
            {"labeled": {"quality": "expert", "size": 0}},
            {"unlabeled": {"quality": "superhuman", "size": 10}},
        ],
    )
    def test_invalid_configs(self, overrides):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(small_doc(**overrides))

    def test_named_strategies_may_share_a_kind(self):
        doc = small_doc(strategies=["cds_uds", {"kind": "cds_uds", "weight_mode": "soft", "name": "cds_uds_soft"}])
        labels = [s.label for s in ExperimentConfig.from_dict(doc).strategies]
        assert labels == ["cds_uds", "cds_uds_soft"]

    def test_duplicate_composition_names(self):
        pair = {"name": "x", "labeled": {"size": 5}, "unlabeled": {"size": 5}}
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"compositions": [pair, pair]})

    def test_hash_ignores_output_settings(self):
        a = ExperimentConfig.from_dict(small_doc(output_dir="one", parallel=1))
        b = ExperimentConfig.from_dict(small_doc(output_dir="two", parallel=4))
        c = ExperimentConfig.from_dict(small_doc(delta=0.05))
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != c.config_hash()
        assert len(a.config_hash()) == 16


class TestLoadConfig:
    def test_yaml(self, tmp_path):
        path = tmp_path / "config.yaml"
        path.write_text("mdp: {family: chain, size: 4}\nlabeled: {size: 10}\nunlabeled: {size: 20}\nseeds: 2\n")
        config = load_config(path)
        assert config.mdp_spec["family"] == "chain" and config.seeds == [0, 1]

    def test_json(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(small_doc()))
        assert load_config(str(path)).name == "small"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.yaml")

    def test_malformed_yaml(self, tmp_path):
        path = tmp_path / "broken.yaml"
        path.write_text("labeled: [1, 2\n")
        with pytest.raises(ConfigError):
            load_config(path)


class TestSweep:
    def test_one_record_per_arm(self):
        records = run_experiment(ExperimentConfig.from_dict(small_doc()), progress=False)
        assert len(records) == 1
        row = records[0].to_row()
        assert not records[0].failed, row["error"]
        assert set(row) == set(RECORD_COLUMNS)
        assert row["strategy"] == "uds" and row["composition"] == "main"
        assert math.isfinite(row["j_true"]) and row["j_optimal"] >= row["j_true"] - 1e-9

    def test_reruns_are_byte_identical(self, tmp_path):
        config = ExperimentConfig.from_dict(small_doc(strategies=["no_sharing", "uds", "cds_uds"], seeds=2))
        first = write_outputs(config, run_experiment(config, progress=False), str(tmp_path / "one"))
        second = write_outputs(config, run_experiment(config, progress=False), str(tmp_path / "two"))
        with open(first["records"], "rb") as a, open(second["records"], "rb") as b:
            assert a.read() == b.read()

    def test_labeled_data_is_shared_across_compositions(self):
        doc = small_doc(strategies=["no_sharing"], seeds=2)
        doc.pop("labeled")
        doc.pop("unlabeled")
        doc["compositions"] = [
            {"name": "small", "labeled": {"quality": "medium", "size": 30}, "unlabeled": {"quality": "random", "size": 50}},
            {"name": "large", "labeled": {"quality": "medium", "size": 30}, "unlabeled": {"quality": "expert", "size": 500}},
        ]
        frame = harness.records_frame(run_experiment(ExperimentConfig.from_dict(doc), progress=False))
        by_composition = frame.pivot(index="seed", columns="composition", values="j_true")
        assert list(by_composition["small"]) == list(by_composition["large"])

    def test_failing_arm_does_not_stop_the_sweep(self, monkeypatch):
        original = harness.apply_strategy

        def flaky(spec, labeled, unlabeled, context=None):
            if spec.kind == "uds":
                raise RuntimeError("boom")
            return original(spec, labeled, unlabeled, context)

        monkeypatch.setattr(harness, "apply_strategy", flaky)
        config = ExperimentConfig.from_dict(small_doc(strategies=["no_sharing", "uds"]))
        records = run_experiment(config, progress=False)
        assert [r.failed for r in records] == [False, True]
        assert records[1].values["error"] == "RuntimeError: boom"
        assert math.isnan(records[1].to_row()["j_true"])

    def test_setup_failure_marks_every_arm(self):
        config = ExperimentConfig.from_dict(small_doc(mdp={"family": "torus"}, strategies=["no_sharing", "uds"]))
        records = run_experiment(config, progress=False)
        assert len(records) == 2
        assert all(r.values["error"].startswith("setup failed") for r in records)

    def test_dead_worker_fails_only_its_task(self, monkeypatch):
        class BrokenPool:
            def __init__(self, max_workers):
                pass

            def __enter__(self):
                return self

            def __exit__(self, *exc):
                return False

            def submit(self, fn, doc, ci, seed):
                future = Future()
                if seed == 1:
                    future.set_exception(BrokenProcessPool("worker exited abruptly"))
                else:
                    future.set_result(fn(doc, ci, seed))
                return future

        monkeypatch.setattr(harness, "ProcessPoolExecutor", BrokenPool)
        config = ExperimentConfig.from_dict(small_doc(strategies=["no_sharing", "uds"], seeds=2, parallel=2))
        records = run_experiment(config, progress=False)
        assert [(r.values["seed"], r.failed) for r in records] == [(0, False), (0, False), (1, True), (1, True)]
        assert records[2].values["error"].startswith("worker failed: BrokenProcessPool")
        assert records[3].values["strategy"] == "uds"

    def test_unreadable_task_config_is_recorded(self):
        [record] = harness.run_task({"compositions": []}, 0, 5)
        assert record.failed and record.values["seed"] == 5
        assert record.values["error"].startswith("setup failed")


class TestEmitTable:
    def test_single_seed_marks_ci_unavailable(self):
        result = emit_table(rows([1.0]))
        assert "1.000 (CI n/a)" in result.markdown
        assert result.frame["ci"].tolist() == [0.0]

    def test_identical_values_have_zero_width(self):
        assert "2.000 ± 0.000" in emit_table(rows([2.0, 2.0, 2.0])).markdown

    def test_interval_uses_normal_quantile(self):
        result = emit_table(rows([1.0, 2.0, 3.0]))
        assert result.frame["ci"].iloc[0] == pytest.approx(1.96 / math.sqrt(3))
        assert "2.000 ± 1.132" in result.markdown

    def test_rows_and_columns_are_sorted(self):
        records = rows([1.0], "b", "uds") + rows([2.0], "a", "uds") + rows([3.0], "a", "cds_uds")
        frame = emit_table(records).frame
        assert frame["composition"].tolist() == ["a", "a", "b"]
        assert frame["strategy"].tolist() == ["cds_uds", "uds", "uds"]

    def test_missing_values_are_skipped(self):
        records = rows([1.0, 3.0]) + [{"composition": "a", "strategy": "uds", "seed": 9, "j_true": math.nan}]
        assert emit_table(records).frame["n"].tolist() == [2]

    def test_empty(self):
        with pytest.raises(EmptyDatasetError):
            emit_table([])

    def test_unknown_key(self):
        with pytest.raises(UnknownKeyError):
            emit_table(rows([1.0]), metric="j_imaginary")

    def test_write(self, tmp_path):
        emit_table(rows([1.0, 2.0])).write(str(tmp_path / "tables" / "j"))
        assert (tmp_path / "tables" / "j.md").exists()
        assert len(pd.read_csv(tmp_path / "tables" / "j.csv")) == 1


class TestEmitPlotdata:
    def test_columns_and_band(self):
        records = [dict(r, unlabeled_size=100) for r in rows([1.0, 3.0])]
        records += [dict(r, unlabeled_size=1000) for r in rows([4.0])]
        frame = emit_plotdata(records, "unlabeled_size")
        assert list(frame.columns) == ["x", "series", "mean", "ci_lo", "ci_hi", "n"]
        assert frame["x"].tolist() == [100, 1000]
        first = frame.iloc[0]
        assert first["ci_lo"] < first["mean"] == 2.0 < first["ci_hi"]
        assert frame.iloc[1]["ci_lo"] == frame.iloc[1]["ci_hi"] == 4.0

    def test_unknown_axis(self):
        with pytest.raises(UnknownKeyError):
            emit_plotdata(rows([1.0]), "labeled_size")


class TestWriteOutputs:
    def test_files(self, tmp_path):
        doc = small_doc(
            strategies=["no_sharing", "uds"],
            tables=[{"name": "returns", "group_by": "composition", "metric": "j_true"}],
            plots=[{"name": "by_size", "x": "unlabeled_size"}],
        )
        config = ExperimentConfig.from_dict(doc)
        records = run_experiment(config, progress=False)
        written = write_outputs(config, records, str(tmp_path))

        assert (tmp_path / "tables" / "returns.md").exists()
        assert (tmp_path / "plots" / "by_size.csv").exists()
        assert list(pd.read_csv(written["timings"]).columns) == ["composition", "seed", "strategy", "wall_time"]

        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["records"] == 2 and manifest["failures"] == 0
        assert manifest["config_hash"] == config.config_hash()
        assert "output_dir" not in manifest["config"]

        restored = load_records(written["records"])
        assert list(restored.columns) == RECORD_COLUMNS
        assert restored["error"].tolist() == ["", ""]
