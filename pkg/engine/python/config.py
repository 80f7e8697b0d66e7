"""
Configuration: experiment schemas, environment settings and logging setup
"""

import hashlib
import logging
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from enum import Enum
from itertools import product
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import tomli_w
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict
from pythonjsonlogger import jsonlogger

from engine.python.dataset import FeatureGroup
from engine.python.errors import ConfigError
from engine.python.model import Architecture, ModelConfig
from engine.python.synthetic import DriverProfile

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

RhoSpec = Union[float, Tuple[float, float]]


class Method(str, Enum):
    FEDAVG = "FedAvg"
    FEDPROX = "FedProx"
    FEDPAW = "FedPAW"
    LOCAL = "Local"  # every client trains alone
    CLOUD = "Cloud"  # one model on the pooled training data

    @property
    def is_federated(self) -> bool:
        return self in (Method.FEDAVG, Method.FEDPROX, Method.FEDPAW)


def _check_rho(value: RhoSpec) -> RhoSpec:
    if isinstance(value, (tuple, list)):
        lo, hi = value
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"rho range must satisfy 0 < lo <= hi <= 1, got {value}")
        return (float(lo), float(hi))
    if not 0.0 < value <= 1.0:
        raise ValueError(f"rho must lie in (0, 1], got {value}")
    return float(value)


def rho_label(rho: RhoSpec) -> str:
    if isinstance(rho, tuple):
        return f"{rho[0]:g}-{rho[1]:g}"
    return f"{rho:g}"


def default_pa_layers(horizon: int) -> int:
    return 2 if horizon <= 5 else 4


class FLConfig(BaseModel):
    """Federated training hyperparameters of one run"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    method: Method = Method.FEDPAW
    rounds: int = Field(300, ge=1, description="T, total iterations")
    rho: RhoSpec = Field(1.0, description="Join ratio or [rho_min, rho_max]")
    warmup_rounds: int = Field(1, ge=1, description="r, FedAvg-only iterations before PA")
    pa_layers: int = Field(2, ge=1, description="p, top layers touched by PA")
    learning_rate: float = Field(0.005, gt=0)
    batch_size: int = Field(64, ge=1)
    local_epochs: int = Field(1, ge=1)
    prox_mu: float = Field(0.01, ge=0)
    workers: int = Field(1, ge=1, description="Threads for parallel local training")

    @field_validator("rho")
    @classmethod
    def validate_rho(cls, value):
        return _check_rho(value)


class CorpusConfig(BaseModel):
    """Where client traces come from"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    source: Literal["synthetic", "csv"] = "synthetic"
    num_clients: int = Field(10, gt=0)
    duration_s: int = Field(3600, gt=0)
    seed: int = 0
    csv_path: Optional[str] = None
    column_map: Dict[str, str] = Field(default_factory=dict)
    profiles: Optional[List[DriverProfile]] = None

    @model_validator(mode="after")
    def check_source(self) -> "CorpusConfig":
        if self.source == "csv" and not self.csv_path:
            raise ValueError("corpus.csv_path is required when source = 'csv'")
        if self.profiles is not None and len(self.profiles) != self.num_clients:
            raise ValueError(f"{len(self.profiles)} profiles given for {self.num_clients} clients")
        return self


class ModelSpec(BaseModel):
    """Model hyperparameters; unset values follow the horizon defaults"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    hidden_dim: int = Field(128, gt=0)
    num_heads: int = Field(4, ge=1)
    architecture: Architecture = Architecture.SEQ2SEQ_ATTENTION
    encoder_layers: Optional[int] = Field(None, ge=1)
    decoder_layers: Optional[int] = Field(None, ge=1)
    dropout_rate: Optional[float] = Field(None, ge=0.0, lt=1.0)

    def build(self, input_dim: int, horizon: int) -> ModelConfig:
        base = ModelConfig.for_horizon(input_dim, horizon, self.hidden_dim, self.num_heads, self.architecture)
        overrides = {
            key: value
            for key, value in (
                ("encoder_layers", self.encoder_layers),
                ("decoder_layers", self.decoder_layers),
                ("dropout_rate", self.dropout_rate),
            )
            if value is not None
        }
        return ModelConfig(**{**base.model_dump(), **overrides}) if overrides else base


class MatrixConfig(BaseModel):
    """Axes of the run matrix; r and p only multiply FedPAW runs"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    methods: List[Method] = Field(default_factory=lambda: [Method.FEDAVG, Method.FEDPAW])
    horizons: List[int] = Field(default_factory=lambda: [5])
    rhos: List[RhoSpec] = Field(default_factory=lambda: [1.0])
    feature_groups: List[FeatureGroup] = Field(default_factory=lambda: [FeatureGroup.FG6])
    warmup_rounds: List[int] = Field(default_factory=lambda: [1])
    pa_layers: Optional[List[int]] = None

    @field_validator("rhos")
    @classmethod
    def validate_rhos(cls, values):
        return [_check_rho(v) for v in values]

    @field_validator("methods", "horizons", "rhos", "feature_groups", "warmup_rounds")
    @classmethod
    def non_empty(cls, values):
        if not values:
            raise ValueError("matrix axes must not be empty")
        return values

    @field_validator("horizons", "warmup_rounds")
    @classmethod
    def positive(cls, values):
        if any(v < 1 for v in values):
            raise ValueError("horizons and warmup rounds must be >= 1")
        return values


class RunSpec(BaseModel):
    """One cell of the run matrix"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    method: Method
    horizon: int
    rho: RhoSpec
    feature_group: FeatureGroup
    warmup_rounds: int
    pa_layers: int
    seed_index: int
    run_seed: int

    @property
    def run_id(self) -> str:
        return (
            f"{self.method.value}-H{self.horizon}-rho{rho_label(self.rho)}-{self.feature_group.value}"
            f"-r{self.warmup_rounds}-p{self.pa_layers}-s{self.seed_index}"
        )


def derive_run_seed(master_seed: int, method: Method, horizon: int, rho: RhoSpec, seed_index: int) -> int:
    """seed_run = hash(master, method, horizon, rho, seed_index), 32 bits"""
    key = f"{master_seed}|{method.value}|{horizon}|{rho_label(rho)}|{seed_index}"
    return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:4], "little")


class ExperimentConfig(BaseModel):
    """Declarative description of an experiment matrix"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = "fedpaw"
    output_dir: str = "runs"
    master_seed: int = 0
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    early_stop_patience: int = Field(30, ge=0, description="Rounds without improvement before stopping; 0 disables")
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    model: ModelSpec = Field(default_factory=ModelSpec)
    training: FLConfig = Field(default_factory=FLConfig)
    matrix: MatrixConfig = Field(default_factory=MatrixConfig)

    @field_validator("seeds")
    @classmethod
    def seeds_present(cls, values):
        if not values or len(set(values)) != len(values):
            raise ValueError("seeds must be a non-empty list of distinct indices")
        return values

    @model_validator(mode="after")
    def check_models(self) -> "ExperimentConfig":
        """Every (horizon, feature group) must give a buildable model deep enough for p"""
        m = self.matrix
        for horizon, group in product(m.horizons, m.feature_groups):
            try:
                built = self.model.build(group.input_dim(horizon), horizon)
            except ValidationError as exc:
                errors = "; ".join(e["msg"] for e in exc.errors())
                raise ValueError(f"model for H={horizon} {group.value}: {errors}") from None
            if Method.FEDPAW not in m.methods:
                continue
            for p in m.pa_layers or [default_pa_layers(horizon)]:
                if p > built.layer_count:
                    raise ValueError(
                        f"pa_layers {p} exceeds the {built.layer_count} layers of the H={horizon} model"
                    )
        return self

    @classmethod
    def from_toml(cls, path: Union[str, Path]) -> "ExperimentConfig":
        try:
            with open(path, "rb") as f:
                raw = tomllib.load(f)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        try:
            return cls.model_validate(raw)
        except ValidationError as exc:
            raise ConfigError(str(exc)) from exc

    def to_toml(self) -> str:
        return tomli_w.dumps(self.model_dump(mode="json", exclude_none=True))

    def output_root(self, settings: Optional["Settings"] = None) -> Path:
        settings = settings or Settings()
        return Path(settings.out) if settings.out else Path(self.output_dir)

    def spat_horizon(self) -> int:
        return max(self.matrix.horizons)

    def expand(self) -> List[RunSpec]:
        """Cartesian product method x horizon x rho x feature group x seed (x r x p for FedPAW)"""
        runs = []
        m = self.matrix
        for method, horizon, rho, group, seed_index in product(
            m.methods, m.horizons, m.rhos, m.feature_groups, self.seeds
        ):
            pa_options = m.pa_layers or [default_pa_layers(horizon)]
            if method == Method.FEDPAW:
                sweeps = list(product(m.warmup_rounds, pa_options))
            else:
                sweeps = [(m.warmup_rounds[0], pa_options[0])]
            for warmup, pa in sweeps:
                runs.append(RunSpec(
                    method=method,
                    horizon=horizon,
                    rho=rho,
                    feature_group=group,
                    warmup_rounds=warmup,
                    pa_layers=pa,
                    seed_index=seed_index,
                    run_seed=derive_run_seed(self.master_seed, method, horizon, rho, seed_index),
                ))
        return runs

    def fl_config(self, run: RunSpec) -> FLConfig:
        return self.training.model_copy(update={
            "method": run.method,
            "rho": run.rho,
            "warmup_rounds": run.warmup_rounds,
            "pa_layers": run.pa_layers,
        })


class Settings(BaseSettings):
    """Process settings from FEDPAW_* environment variables or .env"""
    model_config = SettingsConfigDict(env_prefix="FEDPAW_", env_file=".env", extra="ignore")

    out: Optional[Path] = None
    log_level: str = "INFO"
    log_json: bool = False
    database_url: Optional[str] = None


def configure_logging(level: str = "INFO", json_format: bool = False) -> None:
    """Install a single stderr handler with the text or JSON format"""
    handler = logging.StreamHandler(sys.stderr)
    if json_format:
        handler.setFormatter(jsonlogger.JsonFormatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    else:
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root = logging.getLogger()
    root.handlers = [handler]
    root.setLevel(level.upper())
