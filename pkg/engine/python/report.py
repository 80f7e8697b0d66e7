"""
Report Builder
Seed-aggregated summary table, MAE curves and computation/communication accounting
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import pandas as pd

logger = logging.getLogger(__name__)

GROUP_KEYS = ["method", "horizon", "rho", "feature_group", "warmup_rounds", "pa_layers"]
CHECK_COLUMNS = ["check", "horizon", "feature_group", "value", "threshold", "passed"]

# Relative MAE margins and the partial-participation spread bound
FEDPAW_MARGIN = 0.05
CV_MARGIN = 0.20
STD_RATIO_LIMIT = 3.0


@dataclass
class ReportResult:
    out_dir: Path
    summary_table: pd.DataFrame
    curves: pd.DataFrame
    accounting: pd.DataFrame
    checks: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=CHECK_COLUMNS))
    runs: List[str] = field(default_factory=list)
    incomplete: List[str] = field(default_factory=list)


def discover_runs(paths: Sequence[Union[str, Path]]) -> Tuple[List[Path], List[Path], List[Path]]:
    """
    Expand experiment roots and run directories into run directories

    Returns:
        (complete run dirs, incomplete run dirs, experiment roots)
    """
    complete: List[Path] = []
    incomplete: List[Path] = []
    roots: List[Path] = []
    for raw in paths:
        path = Path(raw)
        if (path / "runs").is_dir():
            roots.append(path)
            candidates = sorted(p for p in (path / "runs").iterdir() if p.is_dir())
        else:
            candidates = [path]
        for run_dir in candidates:
            if (run_dir / "summary.json").is_file() and (run_dir / "rounds.jsonl").is_file():
                complete.append(run_dir)
            else:
                incomplete.append(run_dir)
    return complete, incomplete, roots


def _load_summary(run_dir: Path) -> dict:
    return json.loads((run_dir / "summary.json").read_text(encoding="utf-8"))


def _load_rounds(run_dir: Path) -> pd.DataFrame:
    return pd.read_json(run_dir / "rounds.jsonl", lines=True)


def _format_cell(mean: float, std: float) -> str:
    return f"{mean:.3f}±{std:.3f}"


def summary_table(summaries: List[dict], baselines: Optional[pd.DataFrame] = None) -> pd.DataFrame:
    """
    Mean and sample standard deviation of the best-round MAE/RMSE across seeds

    A single seed reports std 0.
    """
    columns = GROUP_KEYS + ["seeds", "mae_mean", "mae_std", "rmse_mean", "rmse_std", "mae", "rmse"]
    if not summaries:
        return pd.DataFrame(columns=columns)
    frame = pd.DataFrame(summaries)
    grouped = frame.groupby(GROUP_KEYS, sort=True)
    table = grouped.agg(
        seeds=("seed_index", "count"),
        mae_mean=("best_mae", "mean"),
        mae_std=("best_mae", "std"),
        rmse_mean=("best_rmse", "mean"),
        rmse_std=("best_rmse", "std"),
    ).reset_index()
    table[["mae_std", "rmse_std"]] = table[["mae_std", "rmse_std"]].fillna(0.0)

    if baselines is not None and len(baselines):
        rows = baselines.rename(columns={"mean_mae": "mae_mean", "mean_rmse": "rmse_mean"}).assign(
            rho="", warmup_rounds=0, pa_layers=0, seeds=1, mae_std=0.0, rmse_std=0.0,
        )
        table = pd.concat([table, rows[GROUP_KEYS + ["seeds", "mae_mean", "mae_std", "rmse_mean", "rmse_std"]]],
                          ignore_index=True)

    table["mae"] = [_format_cell(m, s) for m, s in zip(table["mae_mean"], table["mae_std"])]
    table["rmse"] = [_format_cell(m, s) for m, s in zip(table["rmse_mean"], table["rmse_std"])]
    return table[columns]


def curves_table(run_dirs: List[Path], summaries: List[dict]) -> pd.DataFrame:
    """Mean test MAE per round, one column per run (method and seed)"""
    series = {}
    for run_dir, summary in zip(run_dirs, summaries):
        rounds = _load_rounds(run_dir)
        series[summary["run_id"]] = rounds.set_index("t")["test_mae_mean"]
    if not series:
        return pd.DataFrame()
    curves = pd.DataFrame(series).sort_index()
    curves.index.name = "round"
    return curves[sorted(curves.columns)]


def accounting_table(run_dirs: List[Path], summaries: List[dict]) -> pd.DataFrame:
    """Wall time, rounds to best and parameters moved per round for every run"""
    rows = []
    for run_dir, summary in zip(run_dirs, summaries):
        rounds = _load_rounds(run_dir)
        per_round = rounds["params_transferred"]
        rows.append({
            "run_id": summary["run_id"],
            "method": summary["method"],
            "horizon": summary["horizon"],
            "rho": summary["rho"],
            "parameter_count": summary["parameter_count"],
            "rounds_run": summary["rounds_run"],
            "rounds_to_best": summary["best_round"],
            "total_time_s": summary["total_time_s"],
            "time_per_round_ms": summary["time_per_round_ms"],
            "params_per_round_mean": float(per_round.mean()),
            "params_per_client": summary["params_per_client"],
        })
    return pd.DataFrame(rows)


def _best_row(table: pd.DataFrame, method: str, rho) -> Optional[pd.Series]:
    rows = table[(table["method"] == method) & rho]
    if rows.empty:
        return None
    return rows.loc[rows["mae_mean"].idxmin()]


def ordering_checks(table: pd.DataFrame) -> pd.DataFrame:
    """
    Directional checks over a summary table, per horizon and feature group

    - fedpaw_vs_fedavg: relative MAE gain of FedPAW over FedAvg at full participation
    - fedavg_vs_cv: relative MAE gain of FedAvg over the constant-velocity baseline
    - partial_participation_std: FedPAW seed std with a sampled join ratio over its std at rho = 1

    FedPAW rows from an r/p sweep contribute their best cell. Checks whose
    inputs are missing from the table are left out.
    """
    rows = []
    if table.empty:
        return pd.DataFrame(columns=CHECK_COLUMNS)
    rho = table["rho"].astype(str)
    full, ranged = rho == "1", rho.str.contains("-")
    for (horizon, group), cell in table.groupby(["horizon", "feature_group"], sort=True):
        fedavg = _best_row(cell, "FedAvg", full.loc[cell.index])
        fedpaw = _best_row(cell, "FedPAW", full.loc[cell.index])
        fedpaw_ranged = _best_row(cell, "FedPAW", ranged.loc[cell.index])
        cv = _best_row(cell, "CV", cell["method"] == "CV")

        def add(check: str, value: float, threshold: float, passed: bool) -> None:
            rows.append({
                "check": check, "horizon": horizon, "feature_group": group,
                "value": value, "threshold": threshold, "passed": bool(passed),
            })

        if fedavg is not None and fedpaw is not None:
            gain = (fedavg["mae_mean"] - fedpaw["mae_mean"]) / fedavg["mae_mean"]
            add("fedpaw_vs_fedavg", gain, FEDPAW_MARGIN, gain >= FEDPAW_MARGIN)
        if fedavg is not None and cv is not None:
            gain = (cv["mae_mean"] - fedavg["mae_mean"]) / cv["mae_mean"]
            add("fedavg_vs_cv", gain, CV_MARGIN, gain >= CV_MARGIN)
        if fedpaw is not None and fedpaw_ranged is not None:
            spread, reference = fedpaw_ranged["mae_std"], fedpaw["mae_std"]
            if reference > 0:
                ratio = spread / reference
            else:
                ratio = 0.0 if spread == 0 else float("inf")
            add("partial_participation_std", ratio, STD_RATIO_LIMIT, ratio < STD_RATIO_LIMIT)
    return pd.DataFrame(rows, columns=CHECK_COLUMNS)


def cmd_report(paths: Sequence[Union[str, Path]], out_dir: Optional[Union[str, Path]] = None) -> ReportResult:
    """
    Build summary_table.csv, curves.csv, accounting.csv and checks.csv

    Missing or incomplete run directories are listed and skipped; the
    report covers whatever did complete.
    """
    run_dirs, incomplete, roots = discover_runs(paths)
    for path in incomplete:
        logger.warning(f"Skipping incomplete run directory {path}")
    summaries = [_load_summary(d) for d in run_dirs]

    baseline_frames = [pd.read_csv(root / "baselines.csv") for root in roots if (root / "baselines.csv").is_file()]
    baselines = pd.concat(baseline_frames, ignore_index=True).drop_duplicates() if baseline_frames else None

    if out_dir is None:
        out_dir = (roots[0] if roots else Path(paths[0]).parent) / "report"
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    table = summary_table(summaries, baselines)
    curves = curves_table(run_dirs, summaries)
    accounting = accounting_table(run_dirs, summaries)
    table.to_csv(out_dir / "summary_table.csv", index=False, lineterminator="\n")
    curves.to_csv(out_dir / "curves.csv", lineterminator="\n")
    accounting.to_csv(out_dir / "accounting.csv", index=False, lineterminator="\n")
    checks = ordering_checks(table)
    checks.to_csv(out_dir / "checks.csv", index=False, lineterminator="\n")
    for row in checks.itertuples(index=False):
        verdict = "pass" if row.passed else "FAIL"
        logger.info(f"{row.check} H={row.horizon} {row.feature_group}: {row.value:.3f} vs {row.threshold:g} {verdict}")
    logger.info(f"Report over {len(run_dirs)} runs written to {out_dir}")
    return ReportResult(
        out_dir=out_dir,
        summary_table=table,
        curves=curves,
        accounting=accounting,
        checks=checks,
        runs=[s["run_id"] for s in summaries],
        incomplete=[str(p) for p in incomplete],
    )
