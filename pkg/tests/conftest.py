"""
Shared fixtures: tiny traces, datasets, model configs and ParamSet builders
"""

from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
import pytest

from engine.python.config import FLConfig, Method
from engine.python.dataset import DISTANCE_CAP, GREEN, FeatureGroup, future_columns, prepare_clients
from engine.python.model import ModelConfig
from engine.python.params import ParamEntry, ParamSet
from engine.python.synthetic import default_profiles, generate_synthetic_client
from engine.python.tensor import Tensor

TINY_HORIZON = 3


def make_trace(
    n: int,
    horizon: int = TINY_HORIZON,
    speeds: Optional[Sequence[float]] = None,
    client_id: str = "client_00",
    start: int = 0,
) -> pd.DataFrame:
    """A valid trace with no lead, side vehicle or light; v_T from `speeds` or a ramp"""
    v = np.asarray(speeds, dtype=float) if speeds is not None else 5.0 + np.sin(np.arange(n) / 7.0)
    frame = pd.DataFrame({
        "client_id": client_id,
        "t": np.arange(start, start + n),
        "v_T": v,
        "v_P": v,
        "I_P": 0,
        "I_TL": 0,
        "d_P": DISTANCE_CAP,
        "d_TL": DISTANCE_CAP,
        "s_TL": GREEN,
        "v_S": v,
        "I_S": 0,
        "d_S": DISTANCE_CAP,
        "throttle": 0.2,
        "brake": 0.0,
        "steer": 0.0,
        "r1": 0.1,
        "r2": 0.05,
        "r3": 0.01,
    })
    for column in future_columns(horizon):
        frame[column] = GREEN
    return frame


def make_paramset(layers: List[List[Sequence[float]]]) -> ParamSet:
    """One entry per inner array; layer indices start at 1"""
    entries = []
    for layer_index, arrays in enumerate(layers, start=1):
        for j, values in enumerate(arrays):
            name = f"layer{layer_index}.p{j}"
            entries.append(ParamEntry(layer_index, name, Tensor(np.asarray(values, dtype=float), name=name)))
    return ParamSet(entries)


@pytest.fixture(scope="session")
def tiny_traces():
    """Three short synthetic clients with distinct drivers"""
    profiles = default_profiles(3, seed=1)
    return [
        (f"client_{i:02d}", generate_synthetic_client(p, 240, seed=i, spat_horizon=TINY_HORIZON, client_id=f"client_{i:02d}"))
        for i, p in enumerate(profiles)
    ]


@pytest.fixture
def tiny_datasets(tiny_traces):
    return prepare_clients(tiny_traces, FeatureGroup.FG1, TINY_HORIZON)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(
        input_dim=FeatureGroup.FG1.input_dim(TINY_HORIZON),
        hidden_dim=8,
        encoder_layers=1,
        decoder_layers=1,
        num_heads=2,
        dropout_rate=0.1,
        history_len=TINY_HORIZON,
        horizon=TINY_HORIZON,
    )


@pytest.fixture
def fl_config():
    def build(method: Method = Method.FEDAVG, **overrides) -> FLConfig:
        values = {"method": method, "rounds": 3, "batch_size": 64, "pa_layers": 2}
        values.update(overrides)
        return FLConfig(**values)
    return build
