"""
Federated Round Engine
Client sampling, local training and server-side aggregation (FedAvg, FedProx,
FedPAW) plus the Local and Cloud reference trainers
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from engine.python.config import FLConfig, Method, RhoSpec
from engine.python.dataset import ClientDataset, Windows
from engine.python.errors import ContractError, DivergedClientError, EmptyInputError, NumericError
from engine.python.metrics import BestTracker, EvalReport, evaluate
from engine.python.model import ModelConfig, SpeedModel, init_params, mse_loss, proximal_term
from engine.python.optim import Adam
from engine.python.params import ParamSet, require_all_congruent
from engine.python.tensor import Tensor, hadamard

logger = logging.getLogger(__name__)

POOLED_CLIENT = "pooled"


@dataclass
class ClientState:
    """A participating client: its data, the model it last trained and its FedAvg weight"""
    client_id: str
    dataset: ClientDataset
    model: SpeedModel
    k_weight: float = 0.0
    last_train_loss: Optional[float] = None


@dataclass(frozen=True)
class WeightSummary:
    """Distribution of one layer's aggregation weights"""
    layer: int
    min: float
    max: float
    mean: float
    zero_fraction: float
    one_fraction: float
    degenerate: bool

    def as_dict(self) -> dict:
        return {
            "layer": self.layer, "min": self.min, "max": self.max, "mean": self.mean,
            "zero_fraction": self.zero_fraction, "one_fraction": self.one_fraction,
            "degenerate": self.degenerate,
        }


@dataclass
class RoundState:
    """
    Server state after round t

    global_model is Theta^t, cached_locals the most recent local model of
    every client that ever trained, personalized the PA models Theta_hat_i^t
    produced since warm-up ended. agg_weights is W^{t,p} (zeros during
    warm-up, None for methods without it).
    """
    t: int
    global_model: ParamSet
    cached_locals: Dict[str, ParamSet] = field(default_factory=dict)
    personalized: Dict[str, ParamSet] = field(default_factory=dict)
    agg_weights: Optional[ParamSet] = None
    sampled: List[str] = field(default_factory=list)
    train_loss_mean: float = math.nan
    params_transferred: int = 0
    weight_stats: List[WeightSummary] = field(default_factory=list)

    def model_for(self, client_id: str, method: Method) -> ParamSet:
        """The model the server hands to `client_id` for the next round"""
        if method == Method.FEDPAW:
            return self.personalized.get(client_id, self.global_model)
        if method == Method.LOCAL:
            return self.cached_locals.get(client_id, self.global_model)
        return self.global_model


# ------------------------------------------------------------------ sampling

def sample_size(n: int, rho: float) -> int:
    return max(1, min(n, int(math.floor(rho * n + 0.5))))


def sample_clients(n: int, rho: RhoSpec, rng: np.random.Generator) -> List[int]:
    """
    Draw the indices of this round's participants, sorted ascending

    A (lo, hi) join-ratio range draws rho uniformly first. The sample size
    is round-half-up(rho * N), at least 1, drawn without replacement.
    """
    if n < 1:
        raise ContractError("cannot sample from zero clients")
    if isinstance(rho, tuple):
        rho = float(rng.uniform(rho[0], rho[1]))
    count = sample_size(n, rho)
    if count == n:
        return list(range(n))
    return sorted(int(i) for i in rng.choice(n, size=count, replace=False))


def compute_k_weights(datasets: Sequence[ClientDataset]) -> Dict[str, float]:
    """k_i = training windows of client i / training windows of all clients"""
    sizes = {d.client_id: d.num_train for d in datasets}
    total = sum(sizes.values())
    if total == 0:
        raise EmptyInputError("no client has any training window")
    return {cid: size / total for cid, size in sizes.items()}


# ------------------------------------------------------------ local training

@dataclass
class LocalResult:
    client_id: str
    params: ParamSet
    train_loss: float
    batches: int


def _train_client(
    client: ClientState,
    received: ParamSet,
    method: Method,
    config: FLConfig,
    rng: np.random.Generator,
) -> LocalResult:
    """Run local epochs from `received` without touching the client"""
    client.model.params.require_congruent(received)
    windows = client.dataset.train
    if windows.x_scaled is None:
        raise ContractError(f"client {client.client_id} is not normalized")
    n = len(windows)
    if n == 0:
        return LocalResult(client.client_id, received.clone(), math.nan, 0)

    model = SpeedModel(client.model.config, received.clone(requires_grad=True))
    optimizer = Adam(model.params, lr=config.learning_rate)
    use_prox = method == Method.FEDPROX and config.prox_mu > 0
    losses = []
    batch_index = 0
    for _ in range(config.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            try:
                prediction = model.forward(windows.x_scaled[idx], training=True, rng=rng)
                loss = mse_loss(prediction, windows.y_scaled[idx])
            except NumericError as exc:
                raise DivergedClientError(client.client_id, batch_index, math.nan) from exc
            value = loss.item()
            if not math.isfinite(value):
                raise DivergedClientError(client.client_id, batch_index, value)
            if use_prox:
                loss = loss + proximal_term(model.params, received, config.prox_mu)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(value)
            batch_index += 1
    return LocalResult(client.client_id, model.params.clone(), float(np.mean(losses)), batch_index)


def local_train(
    client: ClientState,
    received: ParamSet,
    method: Method,
    config: FLConfig,
    rng: np.random.Generator,
) -> ParamSet:
    """
    Mini-batch Adam over the client's training windows

    FedProx adds (mu/2)*||theta - received||^2 to the loss. Epoch order is
    a fresh permutation from `rng`, dropout draws from the same stream.

    Returns:
        The updated ParamSet, which also becomes the client's current model

    Raises:
        DivergedClientError: the loss or an activation went non-finite
    """
    result = _train_client(client, received, method, config, rng)
    client.model = SpeedModel(client.model.config, result.params)
    client.last_train_loss = result.train_loss
    return result.params


# ---------------------------------------------------------------- aggregation

def _renormalized(k: Mapping[str, float], ids: Sequence[str]) -> Dict[str, float]:
    total = sum(k[i] for i in ids)
    if total <= 0.0:
        raise ContractError("sampled clients carry no aggregation weight")
    return {i: k[i] / total for i in ids}


def fedavg_aggregate(
    locals_: Mapping[str, ParamSet],
    k: Mapping[str, float],
    sampled: Sequence[str],
) -> ParamSet:
    """
    Theta^t = sum over sampled i of k_i * Theta_i^t

    Weights are renormalized over the sample; the sum runs in client_id
    order so the result is reproducible bit for bit.
    """
    ids = sorted(sampled)
    if not ids:
        raise EmptyInputError("fedavg_aggregate needs at least one sampled client")
    require_all_congruent([locals_[i] for i in ids])
    weights = _renormalized(k, ids)
    acc: Optional[List[np.ndarray]] = None
    for i in ids:
        contribution = [weights[i] * a for a in locals_[i].arrays()]
        acc = contribution if acc is None else [x + y for x, y in zip(acc, contribution)]
    return locals_[ids[0]].with_arrays(acc)


def compute_diff_measure(
    locals_: Mapping[str, ParamSet],
    k: Mapping[str, float],
    sampled: Sequence[str],
    global_params: ParamSet,
    p: int,
) -> ParamSet:
    """
    M^{t,p} = sum over sampled i of k_i * (Theta_i - Theta) squared elementwise

    Covers only the top p layers of the network.
    """
    ids = sorted(sampled)
    if not ids:
        raise EmptyInputError("compute_diff_measure needs at least one sampled client")
    global_params.require_congruent(*(locals_[i] for i in ids))
    top = global_params.top_layer_indices(p)
    global_top = global_params.select_layers(top)
    weights = _renormalized(k, ids)
    acc: Optional[List[np.ndarray]] = None
    for i in ids:
        local_top = locals_[i].select_layers(top)
        contribution = []
        for local_arr, global_arr in zip(local_top.arrays(), global_top.arrays()):
            diff = Tensor(local_arr - global_arr)
            contribution.append(weights[i] * hadamard(diff, diff).data)
        acc = contribution if acc is None else [x + y for x, y in zip(acc, contribution)]
    return global_top.with_arrays(acc)


def normalize_layerwise(diff_measure: ParamSet) -> ParamSet:
    """
    Min-max scale M to [0, 1] separately in each layer

    A layer whose values are all equal gets W = 0 and a warning.
    """
    scaled: List[np.ndarray] = []
    for layer_index in diff_measure.layer_indices:
        arrays = [e.tensor.data for e in diff_measure.layer(layer_index)]
        lo = min(float(a.min()) for a in arrays)
        hi = max(float(a.max()) for a in arrays)
        if hi == lo:
            logger.warning(f"Layer {layer_index}: difference measure is constant, weights set to 0")
            scaled.extend(np.zeros_like(a) for a in arrays)
        else:
            scaled.extend((a - lo) / (hi - lo) for a in arrays)
    return diff_measure.with_arrays(scaled)


def personalized_aggregate(
    global_params: ParamSet,
    local_params: ParamSet,
    weights: ParamSet,
    p: int,
) -> ParamSet:
    """
    Theta_hat_i = (1 - W) * Theta + W * Theta_i on the top p layers, Theta elsewhere

    W = 0 returns the global value and W = 1 the local value exactly.
    """
    global_params.require_congruent(local_params)
    top = global_params.top_layer_indices(p)
    if weights.layer_indices != top:
        raise ContractError(f"weights cover layers {weights.layer_indices}, expected the top {p}: {top}")
    global_params.select_layers(top).require_congruent(weights)
    for entry in weights:
        values = entry.tensor.data
        if values.min() < 0.0 or values.max() > 1.0:
            raise ContractError(f"aggregation weights of {entry.name} leave [0, 1]")

    w_arrays = iter(weights.arrays())
    arrays = []
    for entry, local_arr in zip(global_params, local_params.arrays()):
        if entry.layer_index not in top:
            arrays.append(entry.tensor.data)
            continue
        w = next(w_arrays)
        mixed = hadamard(Tensor(1.0 - w), entry.tensor) + hadamard(Tensor(w), Tensor(local_arr))
        arrays.append(mixed.data)
    return global_params.with_arrays(arrays)


def summarize_weights(weights: ParamSet) -> List[WeightSummary]:
    summaries = []
    for layer_index in weights.layer_indices:
        values = np.concatenate([e.tensor.data.reshape(-1) for e in weights.layer(layer_index)])
        summaries.append(WeightSummary(
            layer=layer_index,
            min=float(values.min()),
            max=float(values.max()),
            mean=float(values.mean()),
            zero_fraction=float(np.mean(values == 0.0)),
            one_fraction=float(np.mean(values == 1.0)),
            degenerate=bool(values.max() == 0.0),
        ))
    return summaries


# --------------------------------------------------------------------- rounds

def client_rng(seed: int, t: int, client_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, t, 1, client_index])


def server_rng(seed: int, t: int) -> np.random.Generator:
    return np.random.default_rng([seed, t, 0])


def run_round(
    state: RoundState,
    clients: Sequence[ClientState],
    config: FLConfig,
    seed: int,
    executor: Optional[ThreadPoolExecutor] = None,
) -> RoundState:
    """
    One communication round: sample, distribute, train locally, aggregate

    Every random draw comes from streams keyed by (seed, t[, client]), so
    results do not depend on worker count or scheduling. The round is
    atomic: if any client fails, neither the returned state nor any client
    has changed.

    Args:
        state: State after round t - 1
        clients: All clients sorted by client_id
        config: Method and hyperparameters
        seed: Run seed
        executor: Optional pool for parallel local training

    Returns:
        State after round t
    """
    method = config.method
    t = state.t + 1
    if method.is_federated:
        indices = sample_clients(len(clients), config.rho, server_rng(seed, t))
    else:
        indices = list(range(len(clients)))
    sampled = [clients[i] for i in indices]
    sampled_ids = [c.client_id for c in sampled]

    def job(index: int, client: ClientState) -> LocalResult:
        received = state.model_for(client.client_id, method)
        return _train_client(client, received, method, config, client_rng(seed, t, index))

    if executor is not None and len(sampled) > 1:
        futures = [executor.submit(job, i, c) for i, c in zip(indices, sampled)]
        results = [f.result() for f in futures]
    else:
        results = [job(i, c) for i, c in zip(indices, sampled)]

    locals_now = {r.client_id: r.params for r in results}
    cached = {**state.cached_locals, **locals_now}
    personalized = dict(state.personalized)
    weights: Optional[ParamSet] = None
    k = {c.client_id: c.k_weight for c in clients}

    if method.is_federated:
        global_new = fedavg_aggregate(locals_now, k, sampled_ids)
        if method == Method.FEDPAW:
            top = global_new.top_layers(config.pa_layers)
            if t < config.warmup_rounds:
                weights = top.zeros_like()
                for cid in sampled_ids:
                    personalized.pop(cid, None)
            else:
                diff = compute_diff_measure(locals_now, k, sampled_ids, global_new, config.pa_layers)
                weights = normalize_layerwise(diff)
                for cid in sampled_ids:
                    personalized[cid] = personalized_aggregate(
                        global_new, locals_now[cid], weights, config.pa_layers
                    )
        transferred = 2 * global_new.num_parameters * len(sampled)
    elif method == Method.LOCAL:
        global_new = state.global_model
        transferred = 0
    else:
        global_new = locals_now[sampled_ids[0]]
        transferred = 0

    losses = [r.train_loss for r in results if not math.isnan(r.train_loss)]
    for client, result in zip(sampled, results):
        client.model = SpeedModel(client.model.config, result.params)
        client.last_train_loss = result.train_loss

    return RoundState(
        t=t,
        global_model=global_new,
        cached_locals=cached,
        personalized=personalized,
        agg_weights=weights,
        sampled=sampled_ids,
        train_loss_mean=float(np.mean(losses)) if losses else math.nan,
        params_transferred=transferred,
        weight_stats=summarize_weights(weights) if weights is not None else [],
    )


# ----------------------------------------------------------------- simulation

def pooled_dataset(datasets: Sequence[ClientDataset]) -> ClientDataset:
    """Concatenate every client's normalized training windows into one client"""
    if not datasets:
        raise EmptyInputError("no client datasets to pool")
    first = datasets[0]
    trains = [d.train for d in datasets]
    pooled = Windows(
        x=np.concatenate([w.x for w in trains]),
        y=np.concatenate([w.y for w in trains]),
        t_index=np.concatenate([w.t_index for w in trains]),
        columns=first.train.columns,
        x_scaled=np.concatenate([w.x_scaled for w in trains]),
        y_scaled=np.concatenate([w.y_scaled for w in trains]),
    )
    return ClientDataset(
        client_id=POOLED_CLIENT,
        records=first.records.iloc[0:0],
        feature_group=first.feature_group,
        history_len=first.history_len,
        horizon=first.horizon,
        train=pooled,
        test=Windows.empty(first.history_len, first.horizon, first.train.columns),
        stats=first.stats,
    )


@dataclass
class RoundRecord:
    """One line of a run's round log"""
    t: int
    method: str
    sampled: List[str]
    train_loss_mean: float
    test_mae_mean: float
    test_rmse_mean: float
    wall_ms: float
    params_transferred: int
    params_per_client: int
    weights: Optional[List[dict]] = None

    def as_dict(self) -> dict:
        return {
            "t": self.t,
            "method": self.method,
            "sampled": self.sampled,
            "train_loss_mean": self.train_loss_mean,
            "test_mae_mean": self.test_mae_mean,
            "test_rmse_mean": self.test_rmse_mean,
            "wall_ms": self.wall_ms,
            "params_transferred": self.params_transferred,
            "params_per_client": self.params_per_client,
            "weights": self.weights,
        }


@dataclass
class SimulationResult:
    rounds: List[RoundRecord]
    reports: List[EvalReport]
    tracker: BestTracker
    final_state: RoundState
    stopped_early: bool
    parameter_count: int

    @property
    def best_report(self) -> Optional[EvalReport]:
        return self.tracker.best_report


class FederatedSimulation:
    """
    Drives T rounds of one method over a fixed client population

    Clients are ordered by client_id. Theta^0 is drawn from the run seed and
    shared by every client. Cloud trains a single model on the pooled
    training windows and evaluates it on every client's test windows.
    """

    def __init__(
        self,
        datasets: Sequence[ClientDataset],
        model_config: ModelConfig,
        config: FLConfig,
        seed: int,
        patience: Optional[int] = None,
    ):
        if not datasets:
            raise EmptyInputError("a simulation needs at least one client")
        if config.method == Method.FEDPAW and not 1 <= config.pa_layers <= model_config.layer_count:
            raise ContractError(
                f"pa_layers={config.pa_layers} outside [1, {model_config.layer_count}]"
            )
        self.model_config = model_config
        self.config = config
        self.seed = seed
        self.patience = patience

        initial = init_params(model_config, np.random.default_rng([seed, 0]))
        datasets = sorted(datasets, key=lambda d: d.client_id)
        k = compute_k_weights(datasets)
        self.eval_clients = [
            ClientState(d.client_id, d, SpeedModel(model_config, initial), k[d.client_id]) for d in datasets
        ]
        if config.method == Method.CLOUD:
            pooled = pooled_dataset(datasets)
            self.clients = [ClientState(POOLED_CLIENT, pooled, SpeedModel(model_config, initial), 1.0)]
        else:
            self.clients = self.eval_clients
        self.state = RoundState(t=0, global_model=initial)
        self.tracker = BestTracker(patience)
        self.last_report: Optional[EvalReport] = None

    @property
    def parameter_count(self) -> int:
        return self.state.global_model.num_parameters

    def evaluation_models(self, state: RoundState) -> Dict[str, ParamSet]:
        """Which model each client is scored with after a round"""
        method = self.config.method
        if method == Method.CLOUD:
            return {c.client_id: state.global_model for c in self.eval_clients}
        return {c.client_id: state.model_for(c.client_id, method) for c in self.eval_clients}

    def step(self, executor: Optional[ThreadPoolExecutor] = None) -> RoundRecord:
        started = time.perf_counter()
        state = run_round(self.state, self.clients, self.config, self.seed, executor)
        models = self.evaluation_models(state)
        report = evaluate(models, self.eval_clients, state.t, self.config.method.value)
        self.state = state
        self.tracker.record(report, models)
        self.last_report = report
        per_client = 2 * self.parameter_count if self.config.method.is_federated else 0
        return RoundRecord(
            t=state.t,
            method=self.config.method.value,
            sampled=state.sampled,
            train_loss_mean=state.train_loss_mean,
            test_mae_mean=report.mean_mae,
            test_rmse_mean=report.mean_rmse,
            wall_ms=(time.perf_counter() - started) * 1000.0,
            params_transferred=state.params_transferred,
            params_per_client=per_client,
            weights=[w.as_dict() for w in state.weight_stats] if state.agg_weights is not None else None,
        )

    def run(self, on_round: Optional[Callable[[RoundRecord, EvalReport], None]] = None) -> SimulationResult:
        """
        Train for config.rounds rounds, or until the mean test MAE has not
        improved for `patience` rounds
        """
        rounds: List[RoundRecord] = []
        reports: List[EvalReport] = []
        stopped_early = False
        pool = ThreadPoolExecutor(max_workers=self.config.workers) if self.config.workers > 1 else None
        try:
            for _ in range(self.config.rounds):
                record = self.step(pool)
                rounds.append(record)
                reports.append(self.last_report)
                if on_round is not None:
                    on_round(record, self.last_report)
                logger.debug(
                    f"{record.method} t={record.t}: loss {record.train_loss_mean:.4f}, "
                    f"MAE {record.test_mae_mean:.4f}, RMSE {record.test_rmse_mean:.4f}"
                )
                if self.tracker.should_stop(record.t):
                    logger.info(f"Early stop at round {record.t}, best round {self.tracker.best_round}")
                    stopped_early = True
                    break
        finally:
            if pool is not None:
                pool.shutdown()
        return SimulationResult(
            rounds=rounds,
            reports=reports,
            tracker=self.tracker,
            final_state=self.state,
            stopped_early=stopped_early,
            parameter_count=self.parameter_count,
        )
