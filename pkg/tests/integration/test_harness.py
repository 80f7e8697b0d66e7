"""
End-to-end experiment pipeline: generate, run, resume and report
"""

import json
import logging

import pandas as pd
import pytest

from database.models import COMPLETED, FAILED, RunRegistry
from engine.python import harness
from engine.python.config import ExperimentConfig, Method, Settings
from engine.python.errors import ConfigError, CorpusExistsError, DatasetError, DivergedClientError
from engine.python.harness import SUMMARY_COLUMNS, cmd_generate, cmd_run, load_corpus
from engine.python.report import cmd_report, ordering_checks, summary_table
from scripts.experiment import main


def _experiment(root, **matrix):
    axes = {"methods": ["FedAvg", "FedPAW"], "horizons": [3], "rhos": [1.0], "feature_groups": ["FG1"]}
    axes.update(matrix)
    return ExperimentConfig.from_dict({
        "name": "tiny",
        "output_dir": str(root),
        "seeds": [0],
        "corpus": {"num_clients": 3, "duration_s": 240, "seed": 1},
        "model": {"hidden_dim": 8, "num_heads": 2, "encoder_layers": 1, "decoder_layers": 1},
        "training": {"rounds": 2, "batch_size": 64},
        "matrix": axes,
    })


@pytest.fixture
def root(tmp_path):
    return tmp_path / "experiment"


@pytest.fixture
def settings(root):
    return Settings(out=root)


@pytest.fixture
def finished(root, settings):
    config = _experiment(root)
    cmd_generate(config, settings)
    outcome = cmd_run(config, settings)
    return config, outcome


class TestGenerate:
    """Synthetic corpus on disk"""

    def test_files_and_manifest(self, root, settings):
        out = cmd_generate(_experiment(root), settings)
        assert sorted(p.name for p in out.glob("*.csv")) == ["client_00.csv", "client_01.csv", "client_02.csv"]
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["spat_horizon"] == 3
        assert [c["seed"] for c in manifest["clients"]] == [1000, 1001, 1002]
        assert manifest["heterogeneity"]["pairs"] == 3

    def test_refuses_to_overwrite(self, root, settings):
        config = _experiment(root)
        out = cmd_generate(config, settings)
        before = (out / "client_01.csv").read_bytes()
        with pytest.raises(CorpusExistsError):
            cmd_generate(config, settings)
        cmd_generate(config, settings, force=True)
        assert (out / "client_01.csv").read_bytes() == before

    def test_run_without_corpus(self, root, settings):
        with pytest.raises(DatasetError):
            load_corpus(_experiment(root), settings)


class TestRun:
    """Run matrix execution and artifacts"""

    def test_outcome(self, finished):
        _, outcome = finished
        assert outcome.exit_code == 0
        assert len(outcome.completed) == 2
        assert outcome.failed == {}

    def test_artifacts(self, root, finished):
        config, outcome = finished
        for run_id in outcome.completed:
            run_dir = root / "runs" / run_id
            lines = (run_dir / "rounds.jsonl").read_text().splitlines()
            assert len(lines) == 2
            summary = json.loads((run_dir / "summary.json").read_text())
            assert summary["run_id"] == run_id
            assert summary["rounds_run"] == 2
            assert (run_dir / "metrics.csv").is_file()
            assert (run_dir / "predictions.csv").is_file()
            assert any((run_dir / "checkpoints").glob("*.fpaw"))
        assert (root / "baselines.csv").is_file()

    def test_communication_accounting(self, root, finished):
        _, outcome = finished
        for run_id in outcome.completed:
            run_dir = root / "runs" / run_id
            summary = json.loads((run_dir / "summary.json").read_text())
            for line in (run_dir / "rounds.jsonl").read_text().splitlines():
                record = json.loads(line)
                assert record["params_transferred"] == 2 * summary["parameter_count"] * len(record["sampled"])

    def test_aggregation_weights_logged(self, root, finished):
        _, outcome = finished
        (fedpaw,) = [r for r in outcome.completed if r.startswith("FedPAW")]
        for line in (root / "runs" / fedpaw / "rounds.jsonl").read_text().splitlines():
            weights = json.loads(line)["weights"]
            assert [w["layer"] for w in weights] == [3, 4]
            for w in weights:
                assert 0.0 <= w["min"] <= w["max"] <= 1.0
                if not w["degenerate"]:
                    assert (w["min"], w["max"]) == (0.0, 1.0)

    def test_summary_csv(self, root, finished):
        summary = pd.read_csv(root / "summary.csv")
        assert list(summary.columns) == SUMMARY_COLUMNS
        assert sorted(summary["method"]) == ["FedAvg", "FedPAW"]

    def test_resume_skips_completed(self, root, settings, finished):
        config, first = finished
        before = (root / "summary.csv").read_bytes()
        outcome = cmd_run(config, settings, resume=True)
        assert outcome.completed == []
        assert sorted(outcome.skipped) == sorted(first.completed)
        assert (root / "summary.csv").read_bytes() == before

    def test_reproducible_summary(self, tmp_path, finished, root):
        other = tmp_path / "again"
        config = _experiment(other)
        cmd_generate(config, Settings(out=other))
        cmd_run(config, Settings(out=other))
        assert (other / "summary.csv").read_bytes() == (root / "summary.csv").read_bytes()

    @pytest.mark.parametrize("error", [
        DivergedClientError("client_01", 3, float("nan")),
        ValueError("hidden_dim 6 is not divisible by num_heads 4"),
    ])
    def test_failed_run_recorded(self, root, settings, monkeypatch, error):
        config = _experiment(root)
        cmd_generate(config, settings)
        real_execute = harness.execute_run

        def execute(config, run, traces, output_root):
            if run.method == Method.FEDPAW:
                raise error
            return real_execute(config, run, traces, output_root)

        monkeypatch.setattr(harness, "execute_run", execute)
        outcome = cmd_run(config, settings)
        assert outcome.exit_code == 1
        assert len(outcome.failed) == 1
        (failed_id, message) = next(iter(outcome.failed.items()))
        assert failed_id.startswith("FedPAW")
        assert message.startswith(type(error).__name__)
        registry = RunRegistry.for_output(root)
        statuses = {r.method: r.status for r in registry.runs()}
        assert statuses == {"FedAvg": COMPLETED, "FedPAW": FAILED}
        assert list(pd.read_csv(root / "summary.csv")["method"]) == ["FedAvg"]

    def test_pa_layers_checked_at_parse(self, root):
        with pytest.raises(ConfigError, match="pa_layers 9"):
            _experiment(root, pa_layers=[9])
        _experiment(root, methods=["FedAvg"], pa_layers=[9])

    def test_execution_time_is_per_run(self, root, finished):
        _, outcome = finished
        registry = RunRegistry.for_output(root)
        for run in registry.runs(status=COMPLETED):
            summary = json.loads((root / "runs" / run.run_id / "summary.json").read_text())
            assert run.execution_time_ms == int(summary["total_time_s"] * 1000)


class TestReport:
    """Seed-aggregated tables"""

    def test_tables(self, root, finished):
        _, outcome = finished
        (root / "runs" / "abandoned").mkdir()
        result = cmd_report([root])
        assert sorted(result.runs) == sorted(outcome.completed)
        assert result.incomplete == [str(root / "runs" / "abandoned")]
        assert sorted(result.summary_table["method"]) == ["CA", "CV", "FedAvg", "FedPAW"]
        assert (result.summary_table["mae_std"] == 0.0).all()
        assert list(result.curves.index) == [1, 2]
        assert sorted(result.curves.columns) == sorted(outcome.completed)
        assert set(result.accounting["rounds_to_best"]) <= {1, 2}
        for name in ("summary_table.csv", "curves.csv", "accounting.csv", "checks.csv"):
            assert (root / "report" / name).is_file()
        assert sorted(result.checks["check"]) == ["fedavg_vs_cv", "fedpaw_vs_fedavg"]


def _summaries(method, rho, maes, pa_layers=2):
    return [
        {"method": method, "horizon": 5, "rho": rho, "feature_group": "FG6", "warmup_rounds": 1,
         "pa_layers": pa_layers, "seed_index": i, "best_mae": mae, "best_rmse": mae * 1.5}
        for i, mae in enumerate(maes)
    ]


class TestOrderingChecks:
    """FedPAW vs FedAvg, FedAvg vs CV and the sampled-participation spread"""

    BASELINES = pd.DataFrame([
        {"method": "CV", "horizon": 5, "feature_group": "FG6", "mean_mae": 1.5, "mean_rmse": 2.0, "clients": 10},
        {"method": "CA", "horizon": 5, "feature_group": "FG6", "mean_mae": 1.8, "mean_rmse": 2.4, "clients": 10},
    ])

    def _checks(self, fedpaw_maes, ranged_maes):
        summaries = (
            _summaries("FedAvg", "1", [1.0, 1.1, 0.9])
            + _summaries("FedPAW", "1", fedpaw_maes)
            + _summaries("FedPAW", "0.1-1", ranged_maes)
        )
        checks = ordering_checks(summary_table(summaries, self.BASELINES))
        return checks.set_index("check")

    def test_all_pass(self):
        checks = self._checks([0.8, 0.9, 0.7], [0.8, 1.0, 0.6])
        assert checks.loc["fedpaw_vs_fedavg", "value"] == pytest.approx(0.2)
        assert checks.loc["fedavg_vs_cv", "value"] == pytest.approx(1 / 3)
        assert checks.loc["partial_participation_std", "value"] == pytest.approx(2.0)
        assert checks["passed"].all()
        assert set(checks["horizon"]) == {5}

    def test_small_gain_and_wide_spread_fail(self):
        checks = self._checks([0.98, 1.08, 0.88], [0.5, 1.5, 1.0])
        assert not checks.loc["fedpaw_vs_fedavg", "passed"]
        assert checks.loc["partial_participation_std", "value"] == pytest.approx(5.0)
        assert not checks.loc["partial_participation_std", "passed"]
        assert checks.loc["fedavg_vs_cv", "passed"]

    def test_best_fedpaw_cell_used(self):
        summaries = (
            _summaries("FedAvg", "1", [1.0])
            + _summaries("FedPAW", "1", [0.99], pa_layers=2)
            + _summaries("FedPAW", "1", [0.5], pa_layers=4)
        )
        checks = ordering_checks(summary_table(summaries)).set_index("check")
        assert checks.loc["fedpaw_vs_fedavg", "value"] == pytest.approx(0.5)

    def test_missing_inputs_skipped(self):
        checks = ordering_checks(summary_table(_summaries("FedAvg", "1", [1.0, 1.2])))
        assert checks.empty
        assert list(checks.columns) == ["check", "horizon", "feature_group", "value", "threshold", "passed"]
        assert ordering_checks(summary_table([])).empty


class TestCli:
    """experiment generate / run / report"""

    @pytest.fixture(autouse=True)
    def restore_logging(self):
        root = logging.getLogger()
        handlers, level = root.handlers[:], root.level
        yield
        root.handlers = handlers
        root.setLevel(level)

    def test_full_cycle(self, tmp_path, monkeypatch):
        root = tmp_path / "cli"
        config_path = tmp_path / "tiny.toml"
        config_path.write_text(_experiment(root, methods=["FedProx"]).to_toml())
        monkeypatch.delenv("FEDPAW_OUT", raising=False)

        assert main(["generate", "--config", str(config_path)]) == 0
        assert main(["generate", "--config", str(config_path)]) == 2
        assert main(["run", "--config", str(config_path)]) == 0
        assert main(["report", "--runs", str(root), "--out", str(tmp_path / "report")]) == 0
        assert (tmp_path / "report" / "summary_table.csv").is_file()

    def test_bad_config(self, tmp_path):
        config_path = tmp_path / "bad.toml"
        config_path.write_text("[training]\nrounds = 0\n")
        assert main(["run", "--config", str(config_path)]) == 2

    def test_bad_model_rejected_before_compute(self, tmp_path):
        root = tmp_path / "cli"
        config_path = tmp_path / "heads.toml"
        config_path.write_text(
            f"output_dir = \"{root.as_posix()}\"\n[model]\nhidden_dim = 6\nnum_heads = 4\n"
        )
        assert main(["run", "--config", str(config_path)]) == 2
        assert not (root / "registry.db").exists()
