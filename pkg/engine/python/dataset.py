"""
Driving-record ingestion, feature groups, windowing and normalization

A client's trace is a time-ordered pandas DataFrame with one row per second
and the columns of RECORD_COLUMNS plus s_TL_f1..s_TL_fK future signal states.
"""

import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from engine.python.errors import ContractError, ParseError, ValidationError

logger = logging.getLogger(__name__)

DISTANCE_CAP = 100.0  # metres; beyond it an object counts as absent
RED, YELLOW, GREEN = 0, 1, 2

BASE_COLUMNS = ["v_T", "v_P", "I_P", "I_TL", "d_P", "d_TL", "s_TL"]
SIDE_COLUMNS = ["v_S", "I_S", "d_S"]
CONTROL_COLUMNS = ["throttle", "brake", "steer"]
TEPI_COLUMNS = ["r1", "r2", "r3"]
RECORD_COLUMNS = (
    ["client_id", "t", "v_T", "v_P", "I_P", "I_TL", "d_P", "d_TL", "s_TL", "v_S", "I_S", "d_S"]
    + CONTROL_COLUMNS
    + TEPI_COLUMNS
)
INDICATOR_COLUMNS = {"I_P", "I_TL", "I_S"}


def future_columns(horizon: int) -> List[str]:
    return [f"s_TL_f{j}" for j in range(1, horizon + 1)]


def is_passthrough(column: str) -> bool:
    """Indicators and signal states keep their raw {0, 1, 2} codes"""
    return column in INDICATOR_COLUMNS or column.startswith("s_TL")


class FeatureGroup(str, Enum):
    """Input feature sets FG1..FG7"""
    FG1 = "FG1"
    FG2 = "FG2"
    FG3 = "FG3"
    FG4 = "FG4"
    FG5 = "FG5"
    FG6 = "FG6"
    FG7 = "FG7"

    @property
    def extras(self) -> List[str]:
        side, control, tepi = SIDE_COLUMNS, CONTROL_COLUMNS, TEPI_COLUMNS
        return {
            "FG1": [],
            "FG2": side,
            "FG3": control,
            "FG4": tepi,
            "FG5": side + tepi,
            "FG6": control + tepi,
            "FG7": side + control + tepi,
        }[self.value]

    def columns(self, horizon: int) -> List[str]:
        return BASE_COLUMNS + future_columns(horizon) + self.extras

    def input_dim(self, horizon: int) -> int:
        return len(self.columns(horizon))


@dataclass(frozen=True)
class DrivingRecord:
    """One second of driving for one client"""
    t: int
    v_T: float
    v_P: float
    I_P: bool
    I_TL: bool
    d_P: float
    d_TL: float
    s_TL: int
    s_TL_future: Tuple[int, ...]
    v_S: float
    I_S: bool
    d_S: float
    throttle: float
    brake: float
    steer: float
    r1: float
    r2: float
    r3: float

    def to_row(self, client_id: str) -> Dict[str, Union[str, int, float]]:
        row = {
            "client_id": client_id, "t": self.t, "v_T": self.v_T, "v_P": self.v_P,
            "I_P": int(self.I_P), "I_TL": int(self.I_TL), "d_P": self.d_P, "d_TL": self.d_TL,
            "s_TL": self.s_TL, "v_S": self.v_S, "I_S": int(self.I_S), "d_S": self.d_S,
            "throttle": self.throttle, "brake": self.brake, "steer": self.steer,
            "r1": self.r1, "r2": self.r2, "r3": self.r3,
        }
        for name, state in zip(future_columns(len(self.s_TL_future)), self.s_TL_future):
            row[name] = state
        return row


def records_to_frame(records: Sequence[DrivingRecord], client_id: str) -> pd.DataFrame:
    return pd.DataFrame([r.to_row(client_id) for r in records])


# ---------------------------------------------------------------- validation

def validate_trace(trace: pd.DataFrame, client_id: Optional[str] = None) -> None:
    """
    Check the DrivingRecord invariants on every row

    Raises:
        ValidationError: naming the first offending column and time index
    """
    def fail(mask: pd.Series, column: str, message: str) -> None:
        if mask.any():
            t = trace.loc[mask, "t"].iloc[0]
            raise ValidationError(f"client {client_id}, t={t}: {message}", client_id=client_id, column=column)

    for column in ("v_T", "v_P", "v_S"):
        fail(trace[column] < 0, column, f"{column} must be >= 0")
    for column in INDICATOR_COLUMNS:
        fail(~trace[column].isin([0, 1]), column, f"{column} must be 0 or 1")
    for column in [c for c in trace.columns if c.startswith("s_TL")]:
        fail(~trace[column].isin([RED, YELLOW, GREEN]), column, f"{column} must be 0, 1 or 2")
    for column in ("d_P", "d_TL", "d_S"):
        fail((trace[column] < 0) | (trace[column] > DISTANCE_CAP), column, f"{column} outside [0, {DISTANCE_CAP}]")
    for column in ("throttle", "brake", *TEPI_COLUMNS):
        fail((trace[column] < 0) | (trace[column] > 1), column, f"{column} outside [0, 1]")
    fail(trace["steer"].abs() > 1, "steer", "steer outside [-1, 1]")
    fail(trace[TEPI_COLUMNS].sum(axis=1) > 1.0 + 1e-9, "r1", "r1 + r2 + r3 exceeds 1")

    # absent objects carry the sentinel encoding
    for flag, dist, speed in (("I_P", "d_P", "v_P"), ("I_S", "d_S", "v_S"), ("I_TL", "d_TL", None)):
        absent = trace[flag] == 0
        fail(absent & (trace[dist] != DISTANCE_CAP), dist, f"{dist} must be {DISTANCE_CAP} when {flag} is 0")
        if speed is not None:
            fail(absent & ((trace[speed] - trace["v_T"]).abs() > 1e-9), speed, f"{speed} must equal v_T when {flag} is 0")
    fail(trace["t"].duplicated(), "t", "duplicate time index")


# ------------------------------------------------------------------- CSV I/O

def _read_csv_file(path: Path, column_map: Optional[Dict[str, str]]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError as exc:
        raise ParseError(f"{path.name} has no header", line=1) from exc
    except pd.errors.ParserError as exc:
        match = re.search(r"line (\d+)", str(exc))
        raise ParseError(f"{path.name}: {exc}", line=int(match.group(1)) if match else 0) from exc

    if column_map:
        frame = frame.rename(columns=column_map)
    if "client_id" not in frame.columns:
        frame.insert(0, "client_id", path.stem)
    missing = [c for c in RECORD_COLUMNS if c not in frame.columns]
    if missing:
        raise ParseError(f"{path.name} lacks columns {missing}", line=1)

    numeric = [c for c in frame.columns if c != "client_id"]
    for column in numeric:
        converted = pd.to_numeric(frame[column], errors="coerce")
        bad = converted.isna() | ~np.isfinite(converted.fillna(0.0))
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise ParseError(f"{path.name}: column {column} has value {frame[column].iloc[row]!r}", line=row + 2)
        frame[column] = converted
    if len(frame):
        t = frame["t"].to_numpy()
        if np.any(t != np.round(t)):
            row = int(np.flatnonzero(t != np.round(t))[0])
            raise ParseError(f"{path.name}: t must be an integer", line=row + 2)
    frame["t"] = frame["t"].astype(np.int64)
    for column in numeric:
        if column in INDICATOR_COLUMNS or column.startswith("s_TL"):
            frame[column] = frame[column].astype(np.int64)
    frame["client_id"] = frame["client_id"].astype(str)
    return frame


def load_csv(
    path: Union[str, Path],
    column_map: Optional[Dict[str, str]] = None,
) -> List[Tuple[str, pd.DataFrame]]:
    """
    Load CarlaVSP-shaped driving data

    Args:
        path: A CSV file with a client_id column, or a directory of
              per-client CSV files (client id taken from the file stem
              when the column is absent)
        column_map: Optional source-name -> schema-name renames

    Returns:
        (client_id, trace) pairs sorted by client id, each trace time-sorted

    Raises:
        ParseError: malformed row, with its line number
        ValidationError: a record invariant is broken
    """
    path = Path(path)
    files = sorted(path.glob("*.csv")) if path.is_dir() else [path]
    frames = [_read_csv_file(f, column_map) for f in files]
    frames = [f for f in frames if len(f)]
    if not frames:
        return []

    combined = pd.concat(frames, ignore_index=True)
    clients = []
    for client_id, trace in combined.groupby("client_id", sort=True):
        trace = trace.sort_values("t", kind="mergesort").reset_index(drop=True)
        validate_trace(trace, str(client_id))
        clients.append((str(client_id), trace))
    logger.info(f"Loaded {len(clients)} clients ({len(combined)} records) from {path}")
    return clients


def write_csv(trace: pd.DataFrame, path: Union[str, Path]) -> None:
    trace.to_csv(path, index=False, lineterminator="\n")


# ------------------------------------------------------------------ windows

@dataclass
class Windows:
    """
    Sliding (input, target) samples cut from one stretch of a trace

    x: [n, M, input_dim] raw features, y: [n, H] raw target speeds (m/s),
    t_index: time index k of the last input step of each sample.
    x_scaled / y_scaled are filled by normalize().
    """
    x: np.ndarray
    y: np.ndarray
    t_index: np.ndarray
    columns: List[str]
    x_scaled: Optional[np.ndarray] = None
    y_scaled: Optional[np.ndarray] = None

    @classmethod
    def empty(cls, history_len: int, horizon: int, columns: List[str]) -> "Windows":
        return cls(
            x=np.zeros((0, history_len, len(columns))),
            y=np.zeros((0, horizon)),
            t_index=np.zeros(0, dtype=np.int64),
            columns=columns,
        )

    def __len__(self) -> int:
        return len(self.y)

    def __iter__(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        return iter(zip(self.x, self.y))

    @property
    def speed_history(self) -> np.ndarray:
        """Raw v_T inputs, [n, M]"""
        return self.x[:, :, self.columns.index("v_T")]


def build_windows(records: pd.DataFrame, group: FeatureGroup, history_len: int, horizon: int) -> Windows:
    """
    Cut one (x, y) sample per valid time index k

    x stacks the feature-group vector at k-M+1..k, y holds v_T at k+1..k+H.
    Samples whose target segment sits inside a stop longer than H seconds
    (v_T zero from k through k+H) are dropped as parking.
    """
    if history_len != horizon:
        raise ContractError(f"history length {history_len} must equal horizon {horizon}")
    columns = group.columns(horizon)
    missing = [c for c in columns if c not in records.columns]
    if missing:
        raise ContractError(f"records lack columns {missing} needed by {group.value} at H={horizon}")
    n = len(records)
    if n < history_len + horizon:
        return Windows.empty(history_len, horizon, columns)
    t = records["t"].to_numpy()
    if np.any(np.diff(t) != 1):
        raise ContractError("records are not contiguous in time")

    features = records[columns].to_numpy(dtype=np.float64)
    speed = records["v_T"].to_numpy(dtype=np.float64)
    count = n - (history_len + horizon) + 1

    x = sliding_window_view(features, history_len, axis=0)[:count].transpose(0, 2, 1)
    y = sliding_window_view(speed[history_len:], horizon)[:count]
    parked = np.all(sliding_window_view(speed[history_len - 1:], horizon + 1)[:count] == 0.0, axis=1)
    keep = ~parked
    k = np.arange(history_len - 1, history_len - 1 + count)
    return Windows(
        x=np.ascontiguousarray(x[keep]),
        y=np.ascontiguousarray(y[keep]),
        t_index=t[k[keep]],
        columns=columns,
    )


# ------------------------------------------------------------ normalization

@dataclass
class NormalizationStats:
    """Per-feature z-score statistics from one client's training windows"""
    columns: List[str]
    mean: np.ndarray
    scale: np.ndarray
    degenerate: List[str] = field(default_factory=list)

    @property
    def target_mean(self) -> float:
        return float(self.mean[self.columns.index("v_T")])

    @property
    def target_scale(self) -> float:
        return float(self.scale[self.columns.index("v_T")])

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.scale

    def transform_target(self, y: np.ndarray) -> np.ndarray:
        return (y - self.target_mean) / self.target_scale

    def inverse_target(self, y: np.ndarray) -> np.ndarray:
        return y * self.target_scale + self.target_mean


def compute_stats(windows: Windows) -> NormalizationStats:
    columns = windows.columns
    flat = windows.x.reshape(-1, len(columns))
    mean = np.zeros(len(columns))
    scale = np.ones(len(columns))
    degenerate = []
    for j, column in enumerate(columns):
        if is_passthrough(column):
            continue
        if len(flat) == 0:
            degenerate.append(column)
            continue
        mean[j] = flat[:, j].mean()
        std = flat[:, j].std()
        if std > 0.0:
            scale[j] = std
        else:
            degenerate.append(column)
    return NormalizationStats(columns=list(columns), mean=mean, scale=scale, degenerate=degenerate)


# -------------------------------------------------------------- client data

@dataclass
class ClientDataset:
    """One client's trace, its chronological 80/20 window split and scaling stats"""
    client_id: str
    records: pd.DataFrame
    feature_group: FeatureGroup
    history_len: int
    horizon: int
    train: Windows
    test: Windows
    stats: Optional[NormalizationStats] = None

    @property
    def input_dim(self) -> int:
        return self.feature_group.input_dim(self.horizon)

    @property
    def num_train(self) -> int:
        return len(self.train)

    @property
    def is_normalized(self) -> bool:
        return self.stats is not None


def build_client_dataset(
    client_id: str,
    records: pd.DataFrame,
    group: FeatureGroup,
    horizon: int,
    train_fraction: float = 0.8,
) -> ClientDataset:
    """
    Split a trace chronologically and window each side separately

    Test windows come from the last (1 - train_fraction) of the trace, so no
    test input overlaps any training target.
    """
    cut = int(len(records) * train_fraction)
    head = records.iloc[:cut].reset_index(drop=True)
    tail = records.iloc[cut:].reset_index(drop=True)
    dataset = ClientDataset(
        client_id=client_id,
        records=records,
        feature_group=group,
        history_len=horizon,
        horizon=horizon,
        train=build_windows(head, group, horizon, horizon),
        test=build_windows(tail, group, horizon, horizon),
    )
    logger.debug(f"Client {client_id}: {len(dataset.train)} train / {len(dataset.test)} test windows")
    return dataset


def normalize(dataset: ClientDataset) -> None:
    """
    z-score continuous features with statistics from the training windows

    Indicators and signal states pass through unchanged; zero-variance
    features fall back to scale 1 and are listed in stats.degenerate.
    """
    stats = compute_stats(dataset.train)
    if stats.degenerate:
        logger.warning(f"Client {dataset.client_id}: zero-variance features {stats.degenerate}, using scale 1")
    for windows in (dataset.train, dataset.test):
        windows.x_scaled = stats.transform(windows.x)
        windows.y_scaled = stats.transform_target(windows.y)
    dataset.stats = stats


def prepare_clients(
    traces: Sequence[Tuple[str, pd.DataFrame]],
    group: FeatureGroup,
    horizon: int,
) -> List[ClientDataset]:
    """Window, split and normalize every client trace"""
    datasets = []
    for client_id, trace in traces:
        dataset = build_client_dataset(client_id, trace, group, horizon)
        normalize(dataset)
        datasets.append(dataset)
    return datasets
