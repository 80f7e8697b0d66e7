"""
Evaluation: MAE/RMSE in m/s, physics baselines and best-model tracking
"""

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from engine.python.dataset import ClientDataset, Windows
from engine.python.errors import ContractError, CongruenceError, EmptyInputError
from engine.python.model import ModelConfig, SpeedModel
from engine.python.params import ParamSet

if TYPE_CHECKING:
    from engine.python.federated import ClientState

logger = logging.getLogger(__name__)


def _pair(prediction, actual) -> Tuple[np.ndarray, np.ndarray]:
    prediction = np.asarray(prediction, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if prediction.shape != actual.shape:
        raise CongruenceError(f"prediction {prediction.shape} and actual {actual.shape} differ")
    if prediction.size == 0:
        raise EmptyInputError("metrics need at least one value")
    return prediction, actual


def mae(prediction, actual) -> float:
    prediction, actual = _pair(prediction, actual)
    return float(np.mean(np.abs(prediction - actual)))


def rmse(prediction, actual) -> float:
    prediction, actual = _pair(prediction, actual)
    return float(np.sqrt(np.mean((prediction - actual) ** 2)))


# ---------------------------------------------------------------- baselines

def cv_predict(speed_history, horizon: int) -> np.ndarray:
    """Constant velocity: every future step keeps the last observed speed"""
    speed_history = np.asarray(speed_history, dtype=np.float64)
    if speed_history.size < 1:
        raise ContractError("CV needs at least one past speed")
    return np.full(horizon, speed_history[-1])


def ca_predict(speed_history, horizon: int) -> np.ndarray:
    """Constant acceleration from the last two speeds, clamped at standstill"""
    speed_history = np.asarray(speed_history, dtype=np.float64)
    if speed_history.size < 2:
        raise ContractError("CA needs at least two past speeds")
    delta = speed_history[-1] - speed_history[-2]
    return np.maximum(speed_history[-1] + delta * np.arange(1, horizon + 1), 0.0)


def baseline_predictions(speed_histories: np.ndarray, horizon: int, kind: str) -> np.ndarray:
    """Vectorized CV/CA over [n, M] speed histories"""
    last = speed_histories[:, -1:]
    if kind == "CV":
        return np.repeat(last, horizon, axis=1)
    if kind == "CA":
        if speed_histories.shape[1] < 2:
            raise ContractError("CA needs at least two past speeds")
        delta = last - speed_histories[:, -2:-1]
        return np.maximum(last + delta * np.arange(1, horizon + 1), 0.0)
    raise ContractError(f"unknown baseline {kind!r}")


# ----------------------------------------------------------------- reports

@dataclass(frozen=True)
class ClientMetrics:
    mae: float
    rmse: float
    windows: int


@dataclass
class EvalReport:
    """Per-client test errors and their unweighted mean"""
    round: int
    method: str
    per_client: Dict[str, ClientMetrics]
    excluded: List[str] = field(default_factory=list)
    mean_mae: float = 0.0
    mean_rmse: float = 0.0

    def __post_init__(self):
        if self.per_client:
            self.mean_mae = float(np.mean([m.mae for m in self.per_client.values()]))
            self.mean_rmse = float(np.mean([m.rmse for m in self.per_client.values()]))
        else:
            self.mean_mae = self.mean_rmse = math.nan

    def rows(self, **extra) -> List[dict]:
        return [
            {**extra, "round": self.round, "client_id": cid, "mae": m.mae, "rmse": m.rmse}
            for cid, m in sorted(self.per_client.items())
        ]


def _client_metrics(prediction: np.ndarray, dataset: ClientDataset) -> ClientMetrics:
    return ClientMetrics(
        mae=mae(prediction, dataset.test.y),
        rmse=rmse(prediction, dataset.test.y),
        windows=len(dataset.test),
    )


def predict_speeds(config: ModelConfig, params: ParamSet, dataset: ClientDataset) -> np.ndarray:
    """Eval-mode predictions on a client's test windows, back in m/s"""
    if dataset.stats is None or dataset.test.x_scaled is None:
        raise ContractError(f"client {dataset.client_id} is not normalized")
    model = SpeedModel(config, params)
    scaled = model.predict(dataset.test.x_scaled)
    return dataset.stats.inverse_target(scaled)


def evaluate(
    models: Mapping[str, ParamSet],
    clients: Sequence["ClientState"],
    round_index: int,
    method: str,
) -> EvalReport:
    """
    Test MAE/RMSE of each client's model on that client's test windows

    Clients with no test windows are left out of the mean and listed in
    `excluded`.
    """
    per_client: Dict[str, ClientMetrics] = {}
    excluded: List[str] = []
    for client in sorted(clients, key=lambda c: c.client_id):
        dataset = client.dataset
        if len(dataset.test) == 0:
            excluded.append(client.client_id)
            continue
        params = models[client.client_id]
        client.model.params.require_congruent(params)
        prediction = predict_speeds(client.model.config, params, dataset)
        per_client[client.client_id] = _client_metrics(prediction, dataset)
    if excluded:
        logger.warning(f"Round {round_index}: clients without test windows excluded: {excluded}")
    return EvalReport(round=round_index, method=method, per_client=per_client, excluded=excluded)


def evaluate_baseline(datasets: Sequence[ClientDataset], kind: str) -> EvalReport:
    """CV or CA errors per client on the raw test windows"""
    per_client: Dict[str, ClientMetrics] = {}
    excluded: List[str] = []
    for dataset in sorted(datasets, key=lambda d: d.client_id):
        if len(dataset.test) == 0:
            excluded.append(dataset.client_id)
            continue
        prediction = baseline_predictions(dataset.test.speed_history, dataset.horizon, kind)
        per_client[dataset.client_id] = _client_metrics(prediction, dataset)
    return EvalReport(round=0, method=kind, per_client=per_client, excluded=excluded)


def prediction_trace(
    config: ModelConfig,
    params: ParamSet,
    dataset: ClientDataset,
    limit: int = 200,
) -> pd.DataFrame:
    """Predicted vs actual speeds on the first `limit` test windows, long format"""
    if len(dataset.test) == 0:
        return pd.DataFrame(columns=["client_id", "t", "step", "predicted", "actual"])
    subset = ClientDataset(
        client_id=dataset.client_id,
        records=dataset.records,
        feature_group=dataset.feature_group,
        history_len=dataset.history_len,
        horizon=dataset.horizon,
        train=dataset.train,
        test=_head(dataset, limit),
        stats=dataset.stats,
    )
    predicted = predict_speeds(config, params, subset)
    n, horizon = predicted.shape
    return pd.DataFrame({
        "client_id": dataset.client_id,
        "t": np.repeat(subset.test.t_index, horizon) + np.tile(np.arange(1, horizon + 1), n),
        "step": np.tile(np.arange(1, horizon + 1), n),
        "predicted": predicted.reshape(-1),
        "actual": subset.test.y.reshape(-1),
    })


def _head(dataset: ClientDataset, limit: int) -> Windows:
    test = dataset.test
    return Windows(
        x=test.x[:limit],
        y=test.y[:limit],
        t_index=test.t_index[:limit],
        columns=test.columns,
        x_scaled=None if test.x_scaled is None else test.x_scaled[:limit],
        y_scaled=None if test.y_scaled is None else test.y_scaled[:limit],
    )


# ------------------------------------------------------------------ tracker

class BestTracker:
    """
    Keeps the round with the lowest mean test MAE and its models

    For global-model methods every client maps to the same ParamSet; for
    personalized methods each client keeps its own.
    """

    def __init__(self, patience: Optional[int] = None):
        self.patience = patience
        self.best_mae = math.inf
        self.best_round = 0
        self.best_report: Optional[EvalReport] = None
        self.best_models: Dict[str, ParamSet] = {}
        self.curve: List[Tuple[int, float, float, float]] = []

    def record(self, report: EvalReport, models: Mapping[str, ParamSet]) -> bool:
        improved = report.mean_mae < self.best_mae
        if improved:
            self.best_mae = report.mean_mae
            self.best_round = report.round
            self.best_report = report
            self.best_models = dict(models)
        self.curve.append((report.round, report.mean_mae, report.mean_rmse, self.best_mae))
        return improved

    def should_stop(self, round_index: int) -> bool:
        return bool(self.patience) and round_index - self.best_round >= self.patience
