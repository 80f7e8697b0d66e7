"""
Experiment Harness
Corpus generation and execution of the run matrix with per-run artifacts
"""

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import pandas as pd

from database.models import RunRegistry
from engine.python.config import ExperimentConfig, RunSpec, Settings, rho_label
from engine.python.dataset import load_csv, prepare_clients, write_csv
from engine.python.errors import ConfigError, CorpusExistsError, DatasetError, FedPawError
from engine.python.federated import FederatedSimulation, RoundRecord
from engine.python.metrics import EvalReport, evaluate_baseline, prediction_trace
from engine.python.model import SpeedModel
from engine.python.synthetic import default_profiles, generate_synthetic_client, speed_heterogeneity

logger = logging.getLogger(__name__)

CORPUS_DIR = "corpus"
RUNS_DIR = "runs"
MANIFEST = "manifest.json"
SUMMARY_COLUMNS = [
    "run_id", "method", "horizon", "rho", "feature_group", "warmup_rounds", "pa_layers",
    "seed_index", "run_seed", "rounds_run", "best_round", "best_mae", "best_rmse",
    "final_mae", "final_rmse", "parameter_count", "params_per_client",
]
Traces = List[Tuple[str, pd.DataFrame]]


def client_seed(corpus_seed: int, index: int) -> int:
    return corpus_seed * 1000 + index


def _json_safe(value):
    """Non-finite floats become null so every artifact is strict JSON"""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {key: _json_safe(v) for key, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def _dump_json(data, path: Path) -> None:
    path.write_text(json.dumps(_json_safe(data), indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ------------------------------------------------------------------ generate

def cmd_generate(config: ExperimentConfig, settings: Optional[Settings] = None, force: bool = False) -> Path:
    """
    Write one CSV per synthetic client plus manifest.json

    Equal configs give byte-identical files.

    Raises:
        CorpusExistsError: the corpus directory is not empty and force is off
    """
    corpus = config.corpus
    if corpus.source != "synthetic":
        raise ConfigError("generate only applies to synthetic corpora")
    out = config.output_root(settings) / CORPUS_DIR
    if out.exists() and any(out.iterdir()) and not force:
        raise CorpusExistsError(f"{out} already holds a corpus; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    for stale in out.glob("client_*.csv"):
        stale.unlink()

    profiles = corpus.profiles or default_profiles(corpus.num_clients, corpus.seed)
    spat_horizon = config.spat_horizon()
    traces = []
    clients = []
    for i, profile in enumerate(profiles):
        client_id = f"client_{i:02d}"
        seed = client_seed(corpus.seed, i)
        trace = generate_synthetic_client(profile, corpus.duration_s, seed, spat_horizon, client_id)
        write_csv(trace, out / f"{client_id}.csv")
        traces.append((client_id, trace))
        clients.append({"client_id": client_id, "seed": seed, "profile": profile.model_dump(mode="json")})

    _dump_json({
        "source": "synthetic",
        "seed": corpus.seed,
        "duration_s": corpus.duration_s,
        "spat_horizon": spat_horizon,
        "clients": clients,
        "heterogeneity": speed_heterogeneity(traces),
    }, out / MANIFEST)
    logger.info(f"Corpus of {len(profiles)} clients written to {out}")
    return out


def load_corpus(config: ExperimentConfig, settings: Optional[Settings] = None) -> Traces:
    corpus = config.corpus
    if corpus.source == "csv":
        traces = load_csv(corpus.csv_path, corpus.column_map or None)
    else:
        path = config.output_root(settings) / CORPUS_DIR
        if not (path / MANIFEST).exists():
            raise DatasetError(f"no corpus at {path}; run generate first")
        traces = load_csv(path)
    if not traces:
        raise DatasetError("corpus holds no client data")
    return traces


# ----------------------------------------------------------------------- run

def _run_row(run: RunSpec) -> dict:
    return {
        "run_id": run.run_id,
        "method": run.method.value,
        "horizon": run.horizon,
        "rho": rho_label(run.rho),
        "feature_group": run.feature_group.value,
        "warmup_rounds": run.warmup_rounds,
        "pa_layers": run.pa_layers,
        "seed_index": run.seed_index,
        "run_seed": run.run_seed,
    }


def _save_best_models(sim: FederatedSimulation, run_dir: Path) -> None:
    models = sim.tracker.best_models
    out = run_dir / "checkpoints"
    out.mkdir(exist_ok=True)
    distinct = {id(p) for p in models.values()}
    if len(distinct) == 1:
        SpeedModel(sim.model_config, next(iter(models.values()))).save(out / "global.fpaw")
        return
    for client_id, params in sorted(models.items()):
        SpeedModel(sim.model_config, params).save(out / f"{client_id}.fpaw")


def execute_run(config: ExperimentConfig, run: RunSpec, traces: Traces, output_root: Path) -> dict:
    """
    Train one cell of the matrix and write its artifacts

    Writes rounds.jsonl, metrics.csv, predictions.csv, summary.json and
    the best-round checkpoints under runs/<run_id>/.

    Returns:
        The summary dict (also stored as summary.json)
    """
    started = time.perf_counter()
    run_dir = output_root / RUNS_DIR / run.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    datasets = prepare_clients(traces, run.feature_group, run.horizon)
    model_config = config.model.build(datasets[0].input_dim, run.horizon)
    fl_config = config.fl_config(run)
    sim = FederatedSimulation(datasets, model_config, fl_config, run.run_seed, config.early_stop_patience or None)
    logger.info(f"Run {run.run_id} started: {len(datasets)} clients, {sim.parameter_count} parameters")

    metric_rows: List[dict] = []
    rho = rho_label(run.rho)
    with open(run_dir / "rounds.jsonl", "w", encoding="utf-8") as log:
        def on_round(record: RoundRecord, report: EvalReport) -> None:
            log.write(json.dumps(_json_safe(record.as_dict()), sort_keys=True) + "\n")
            metric_rows.extend(report.rows(
                seed=run.seed_index, method=run.method.value, horizon=run.horizon, rho=rho,
            ))
            logger.debug(
                f"[{run.run_id}] round {record.t}: MAE {record.test_mae_mean:.4f}, RMSE {record.test_rmse_mean:.4f}"
            )

        result = sim.run(on_round)

    pd.DataFrame(metric_rows, columns=["seed", "method", "horizon", "rho", "round", "client_id", "mae", "rmse"]) \
        .to_csv(run_dir / "metrics.csv", index=False, lineterminator="\n")
    _save_best_models(sim, run_dir)

    best = sim.tracker
    traces_frames = [
        prediction_trace(model_config, best.best_models[d.client_id], d)
        for d in datasets if d.client_id in best.best_models
    ]
    if traces_frames:
        pd.concat(traces_frames, ignore_index=True).to_csv(
            run_dir / "predictions.csv", index=False, lineterminator="\n"
        )

    elapsed = time.perf_counter() - started
    final = result.reports[-1]
    rounds_run = len(result.rounds)
    summary = {
        **_run_row(run),
        "rounds_run": rounds_run,
        "stopped_early": result.stopped_early,
        "best_round": best.best_round,
        "best_mae": best.best_mae,
        "best_rmse": best.best_report.mean_rmse if best.best_report else None,
        "final_mae": final.mean_mae,
        "final_rmse": final.mean_rmse,
        "parameter_count": result.parameter_count,
        "params_per_client": result.rounds[-1].params_per_client,
        "params_transferred_total": sum(r.params_transferred for r in result.rounds),
        "per_client": {
            cid: {"mae": m.mae, "rmse": m.rmse}
            for cid, m in sorted(best.best_report.per_client.items())
        } if best.best_report else {},
        "total_time_s": elapsed,
        "time_per_round_ms": sum(r.wall_ms for r in result.rounds) / rounds_run,
        "model": model_config.model_dump(mode="json"),
    }
    summary = _json_safe(summary)
    _dump_json(summary, run_dir / "summary.json")
    logger.info(f"Run {run.run_id} finished: best MAE {best.best_mae:.4f} at round {best.best_round}")
    return summary


def _execute_safely(config: ExperimentConfig, run: RunSpec, traces: Traces, output_root: Path) -> Tuple[Optional[dict], Optional[str]]:
    try:
        return execute_run(config, run, traces, output_root), None
    except (FedPawError, ValueError) as exc:
        # pydantic ValidationError is a ValueError
        return None, f"{type(exc).__name__}: {exc}"


def write_baselines(config: ExperimentConfig, traces: Traces, output_root: Path) -> pd.DataFrame:
    """CV and CA errors once per (horizon, feature group)"""
    rows = []
    for horizon in config.matrix.horizons:
        for group in config.matrix.feature_groups:
            datasets = prepare_clients(traces, group, horizon)
            for kind in ("CV", "CA"):
                report = evaluate_baseline(datasets, kind)
                rows.append({
                    "method": kind,
                    "horizon": horizon,
                    "feature_group": group.value,
                    "mean_mae": report.mean_mae,
                    "mean_rmse": report.mean_rmse,
                    "clients": len(report.per_client),
                })
    frame = pd.DataFrame(rows)
    frame.to_csv(output_root / "baselines.csv", index=False, lineterminator="\n")
    return frame


def write_summary(registry: RunRegistry, output_root: Path) -> pd.DataFrame:
    """summary.csv over every completed run; wall-clock fields stay in summary.json"""
    rows = [
        {key: run.result_dict()[key] for key in SUMMARY_COLUMNS}
        for run in registry.runs(status="completed")
    ]
    frame = pd.DataFrame(rows, columns=SUMMARY_COLUMNS)
    frame.to_csv(output_root / "summary.csv", index=False, lineterminator="\n")
    return frame


@dataclass
class RunOutcome:
    completed: List[str] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)
    failed: Dict[str, str] = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return 1 if self.failed else 0


def cmd_run(
    config: ExperimentConfig,
    settings: Optional[Settings] = None,
    jobs: int = 1,
    resume: bool = False,
) -> RunOutcome:
    """
    Execute the full run matrix

    A failed run is recorded in the registry and the matrix continues.
    With resume, runs already completed in the registry are skipped.
    """
    output_root = config.output_root(settings)
    traces = load_corpus(config, settings)
    runs = config.expand()
    registry = RunRegistry.for_output(output_root)
    registry.register(config.name, [
        {**_run_row(r), "run_dir": str(output_root / RUNS_DIR / r.run_id), "config": r.model_dump_json()}
        for r in runs
    ])
    write_baselines(config, traces, output_root)

    outcome = RunOutcome()
    done = set(registry.completed_ids()) if resume else set()
    pending: List[RunSpec] = []
    for run in runs:
        if run.run_id in done:
            outcome.skipped.append(run.run_id)
        else:
            pending.append(run)
    if outcome.skipped:
        logger.info(f"Resuming: {len(outcome.skipped)} completed runs skipped")
    logger.info(f"Executing {len(pending)} of {len(runs)} runs with {jobs} job(s)")

    def record(run: RunSpec, summary: Optional[dict], error: Optional[str]) -> None:
        if error is None:
            registry.mark_completed(run.run_id, summary, int(summary["total_time_s"] * 1000))
            outcome.completed.append(run.run_id)
        else:
            logger.error(f"Run {run.run_id} failed: {error}")
            registry.mark_failed(run.run_id, error)
            outcome.failed[run.run_id] = error

    if jobs > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = []
            for run in pending:
                registry.mark_running(run.run_id)
                futures.append((run, pool.submit(_execute_safely, config, run, traces, output_root)))
            for run, future in futures:
                summary, error = future.result()
                record(run, summary, error)
    else:
        for run in pending:
            registry.mark_running(run.run_id)
            summary, error = _execute_safely(config, run, traces, output_root)
            record(run, summary, error)

    write_summary(registry, output_root)
    logger.info(
        f"Matrix done: {len(outcome.completed)} completed, {len(outcome.skipped)} skipped, "
        f"{len(outcome.failed)} failed"
    )
    return outcome
