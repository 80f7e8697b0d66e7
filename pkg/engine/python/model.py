"""
Multi-Head Attention Augmented Seq2Seq LSTM speed predictor

LSTM encoder -> multi-head self-attention -> LSTM decoder -> fully connected
output. Each LSTM level, the attention block and the output projection are
one layer_index each, numbered from the input side.
"""

import json
import logging
import math
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from engine.python.errors import CongruenceError, ContractError
from engine.python.params import ParamEntry, ParamSet
from engine.python.tensor import Tensor, no_grad, stack

logger = logging.getLogger(__name__)

LstmLevel = Tuple[Tensor, Tensor, Tensor]  # w_ih [in, 4h], w_hh [h, 4h], bias [4h]
LstmState = Tuple[Tensor, Tensor]  # (h, c), each [B, hidden]


class Architecture(str, Enum):
    SEQ2SEQ_ATTENTION = "seq2seq_attention"
    LSTM = "lstm"  # encoder stack + FC, the traditional comparison model


class ModelConfig(BaseModel):
    """Shape of the predictor; shared by every client of a run"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    input_dim: int = Field(..., gt=0, description="Feature-group width")
    hidden_dim: int = Field(128, gt=0)
    encoder_layers: int = Field(2, ge=1)
    decoder_layers: int = Field(2, ge=1)
    num_heads: int = Field(4, ge=1)
    dropout_rate: float = Field(0.1, ge=0.0, lt=1.0)
    history_len: int = Field(..., gt=0, description="M, seconds of history")
    horizon: int = Field(..., gt=0, description="H, seconds predicted")
    architecture: Architecture = Architecture.SEQ2SEQ_ATTENTION

    @model_validator(mode="after")
    def check_shapes(self) -> "ModelConfig":
        if self.history_len != self.horizon:
            raise ValueError("history_len (M) must equal horizon (H)")
        if self.architecture == Architecture.SEQ2SEQ_ATTENTION and self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}")
        return self

    @classmethod
    def for_horizon(
        cls,
        input_dim: int,
        horizon: int,
        hidden_dim: int = 128,
        num_heads: int = 4,
        architecture: Architecture = Architecture.SEQ2SEQ_ATTENTION,
    ) -> "ModelConfig":
        """Two LSTM levels and dropout 0.1 up to 5 s, three levels and 0.2 beyond"""
        levels, dropout = (2, 0.1) if horizon <= 5 else (3, 0.2)
        return cls(
            input_dim=input_dim,
            hidden_dim=hidden_dim,
            encoder_layers=levels,
            decoder_layers=levels,
            num_heads=num_heads,
            dropout_rate=dropout,
            history_len=horizon,
            horizon=horizon,
            architecture=architecture,
        )

    @property
    def layer_count(self) -> int:
        if self.architecture == Architecture.LSTM:
            return self.encoder_layers + 1
        return self.encoder_layers + self.decoder_layers + 2


# ---------------------------------------------------------------- parameters

def _uniform(rng: Optional[np.random.Generator], shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    if rng is None:
        return np.zeros(shape)
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _lstm_entries(prefix: str, layer_index: int, in_dim: int, hidden: int, rng) -> List[ParamEntry]:
    bias = _uniform(rng, (4 * hidden,), hidden)
    if rng is not None:
        bias[hidden:2 * hidden] = 1.0  # forget gate
    return [
        ParamEntry(layer_index, f"{prefix}.w_ih", Tensor(_uniform(rng, (in_dim, 4 * hidden), in_dim), name=f"{prefix}.w_ih")),
        ParamEntry(layer_index, f"{prefix}.w_hh", Tensor(_uniform(rng, (hidden, 4 * hidden), hidden), name=f"{prefix}.w_hh")),
        ParamEntry(layer_index, f"{prefix}.bias", Tensor(bias, name=f"{prefix}.bias")),
    ]


def init_params(config: ModelConfig, rng: Optional[np.random.Generator] = None) -> ParamSet:
    """
    Build the layer-grouped parameters for `config`

    Args:
        config: Model shape
        rng: Seeded generator for uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
             initialization; None gives an all-zero model

    Returns:
        ParamSet with layer indices 1..config.layer_count
    """
    h = config.hidden_dim
    entries: List[ParamEntry] = []
    layer = 1
    for level in range(config.encoder_layers):
        in_dim = config.input_dim if level == 0 else h
        entries += _lstm_entries(f"encoder.{level}", layer, in_dim, h, rng)
        layer += 1

    if config.architecture == Architecture.LSTM:
        entries += [
            ParamEntry(layer, "output.weight", Tensor(_uniform(rng, (h, config.horizon), h), name="output.weight")),
            ParamEntry(layer, "output.bias", Tensor(_uniform(rng, (config.horizon,), h), name="output.bias")),
        ]
        return ParamSet(entries)

    for proj in ("q", "k", "v", "o"):
        entries.append(ParamEntry(layer, f"attention.w_{proj}", Tensor(_uniform(rng, (h, h), h), name=f"attention.w_{proj}")))
        entries.append(ParamEntry(layer, f"attention.b_{proj}", Tensor(_uniform(rng, (h,), h), name=f"attention.b_{proj}")))
    layer += 1

    for level in range(config.decoder_layers):
        entries += _lstm_entries(f"decoder.{level}", layer, h, h, rng)
        layer += 1

    entries += [
        ParamEntry(layer, "output.weight", Tensor(_uniform(rng, (h, 1), h), name="output.weight")),
        ParamEntry(layer, "output.bias", Tensor(_uniform(rng, (1,), h), name="output.bias")),
    ]
    return ParamSet(entries)


def _levels(params: ParamSet, prefix: str, count: int) -> List[LstmLevel]:
    return [
        (params[f"{prefix}.{i}.w_ih"], params[f"{prefix}.{i}.w_hh"], params[f"{prefix}.{i}.bias"])
        for i in range(count)
    ]


# ------------------------------------------------------------------- blocks

def lstm_stack_forward(
    x: Tensor,
    levels: Sequence[LstmLevel],
    dropout_rate: float = 0.0,
    dropout_active: bool = False,
    rng: Optional[np.random.Generator] = None,
    initial_states: Optional[Sequence[LstmState]] = None,
    expected_len: Optional[int] = None,
) -> Tuple[Tensor, List[LstmState]]:
    """
    Run a stack of LSTM levels over a batch of sequences

    Gate order inside the 4*hidden projections is input, forget, cell, output.
    Inverted dropout is applied to the output of every level except the last,
    and only when dropout_active is set.

    Args:
        x: [B, T, in] (a single [T, in] sequence is also accepted)
        levels: (w_ih, w_hh, bias) per level, input side first
        initial_states: Optional (h, c) per level; zeros otherwise

    Returns:
        Top-level hidden states [B, T, hidden] and the final (h, c) per level
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    batch, steps, _ = x.shape
    if expected_len is not None and steps != expected_len:
        raise ContractError(f"sequence length {steps} != expected {expected_len}")
    if dropout_active and dropout_rate > 0.0 and rng is None:
        raise ContractError("dropout needs a random generator")

    finals: List[LstmState] = []
    seq = x
    for depth, (w_ih, w_hh, bias) in enumerate(levels):
        hidden = w_hh.shape[0]
        if initial_states is not None and depth < len(initial_states):
            h, c = initial_states[depth]
        else:
            h, c = Tensor(np.zeros((batch, hidden))), Tensor(np.zeros((batch, hidden)))
        projected = seq @ w_ih + bias  # all timesteps at once
        outputs = []
        for t in range(steps):
            gates = projected[:, t, :] + h @ w_hh
            i = gates[:, :hidden].sigmoid()
            f = gates[:, hidden:2 * hidden].sigmoid()
            g = gates[:, 2 * hidden:3 * hidden].tanh()
            o = gates[:, 3 * hidden:].sigmoid()
            c = f * c + i * g
            h = o * c.tanh()
            outputs.append(h)
        finals.append((h, c))
        seq = stack(outputs, axis=1)
        if dropout_active and dropout_rate > 0.0 and depth < len(levels) - 1:
            keep = rng.random(seq.shape) >= dropout_rate
            seq = seq * (keep / (1.0 - dropout_rate))

    if squeeze:
        seq = seq.reshape(steps, -1)
    return seq, finals


def multi_head_attention(
    h: Tensor,
    params: ParamSet,
    num_heads: int,
    return_weights: bool = False,
) -> Union[Tensor, Tuple[Tensor, np.ndarray]]:
    """
    Scaled dot-product self-attention over the positions of each sequence

    Args:
        h: [B, T, D] (or [T, D])
        params: Model parameters holding attention.{w,b}_{q,k,v,o}
        num_heads: D must be divisible by it
        return_weights: Also return the [B, heads, T, T] attention matrix

    Returns:
        Output of the same shape as `h`
    """
    squeeze = h.ndim == 2
    if squeeze:
        h = h.reshape(1, *h.shape)
    batch, steps, dim = h.shape
    if dim % num_heads:
        raise ContractError(f"hidden size {dim} not divisible by {num_heads} heads")
    head_dim = dim // num_heads

    def project(name: str) -> Tensor:
        out = h @ params[f"attention.w_{name}"] + params[f"attention.b_{name}"]
        return out.reshape(batch, steps, num_heads, head_dim).transpose(0, 2, 1, 3)

    q, k, v = project("q"), project("k"), project("v")
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(head_dim))
    weights = scores.softmax(axis=-1)
    context = (weights @ v).transpose(0, 2, 1, 3).reshape(batch, steps, dim)
    out = context @ params["attention.w_o"] + params["attention.b_o"]

    if squeeze:
        out = out.reshape(steps, dim)
    if return_weights:
        return out, weights.data.copy()
    return out


def mse_loss(prediction: Tensor, target: Union[Tensor, np.ndarray]) -> Tensor:
    """Mean over every element of the squared error"""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if prediction.shape != target.shape:
        raise CongruenceError(f"prediction {prediction.shape} and target {target.shape} differ")
    return (prediction - target).square().mean()


def proximal_term(params: ParamSet, anchor: ParamSet, mu: float) -> Tensor:
    """(mu / 2) * ||theta - theta_anchor||^2, the FedProx regularizer"""
    params.require_congruent(anchor)
    total = None
    for tensor, fixed in zip(params.tensors(), anchor.arrays()):
        term = (tensor - fixed).square().sum()
        total = term if total is None else total + term
    return total * (mu / 2.0)


# -------------------------------------------------------------------- model

def model_forward(
    model: "SpeedModel",
    x: Union[Tensor, np.ndarray],
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """
    Predict H future speeds (normalized units) from M timesteps of features

    Args:
        model: Predictor
        x: [B, M, input_dim] or a single [M, input_dim] window
        training: Enables dropout between LSTM levels
        rng: Dropout randomness, required when training

    Returns:
        [B, H] predictions ([H] for a single window)

    Raises:
        NumericError: naming the block whose output went non-finite
    """
    cfg = model.config
    x = x if isinstance(x, Tensor) else Tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    if x.shape[-1] != cfg.input_dim:
        raise ContractError(f"input width {x.shape[-1]} != model input_dim {cfg.input_dim}")
    batch = x.shape[0]
    params = model.params

    encoded, states = lstm_stack_forward(
        x, _levels(params, "encoder", cfg.encoder_layers),
        cfg.dropout_rate, training, rng, expected_len=cfg.history_len,
    )
    encoded.check_finite("encoder")

    if cfg.architecture == Architecture.LSTM:
        out = encoded[:, -1, :] @ params["output.weight"] + params["output.bias"]
    else:
        attended = multi_head_attention(encoded, params, cfg.num_heads)
        attended.check_finite("attention")
        decoded, _ = lstm_stack_forward(
            attended, _levels(params, "decoder", cfg.decoder_layers),
            cfg.dropout_rate, training, rng, initial_states=states,
        )
        decoded.check_finite("decoder")
        out = (decoded @ params["output.weight"] + params["output.bias"]).reshape(batch, cfg.horizon)

    out.check_finite("output")
    return out.reshape(cfg.horizon) if squeeze else out


class SpeedModel:
    """A ModelConfig plus the ParamSet it owns"""

    def __init__(self, config: ModelConfig, params: ParamSet):
        if params.layer_count != config.layer_count:
            raise CongruenceError(
                f"ParamSet has {params.layer_count} layers, config expects {config.layer_count}"
            )
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, rng: Optional[np.random.Generator] = None) -> "SpeedModel":
        return cls(config, init_params(config, rng))

    @property
    def parameter_count(self) -> int:
        return self.params.num_parameters

    def forward(self, x, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        return model_forward(self, x, training, rng)

    def predict(self, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        """Eval-mode predictions as a plain array"""
        outputs = []
        with no_grad():
            for start in range(0, len(x), batch_size):
                outputs.append(model_forward(self, x[start:start + batch_size]).data)
        if not outputs:
            return np.zeros((0, self.config.horizon))
        return np.concatenate(outputs, axis=0)

    def clone(self, requires_grad: bool = False) -> "SpeedModel":
        return SpeedModel(self.config, self.params.clone(requires_grad=requires_grad))

    def with_params(self, params: ParamSet) -> "SpeedModel":
        init_params(self.config).require_congruent(params)
        return SpeedModel(self.config, params)

    def save(self, path: Union[str, Path]) -> None:
        """Binary ParamSet at `path` plus a JSON ModelConfig sidecar"""
        path = Path(path)
        self.params.save(path)
        path.with_suffix(".json").write_text(json.dumps(self.config.model_dump(mode="json"), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SpeedModel":
        path = Path(path)
        config = ModelConfig.model_validate_json(path.with_suffix(".json").read_text())
        params = ParamSet.load(path)
        init_params(config).require_congruent(params)
        return cls(config, params)

    def __repr__(self):
        return f"<SpeedModel(arch={self.config.architecture.value}, params={self.parameter_count})>"
