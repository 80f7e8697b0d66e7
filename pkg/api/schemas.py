"""
Pydantic Schemas for API Responses
"""

import json
from datetime import datetime
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator


# ==================== Run Schemas ====================

class RunBase(BaseModel):
    """Identity of one run in the matrix"""
    run_id: str = Field(..., description="Unique run identifier", examples=["FedPAW-H5-rho1-FG6-r1-p2-s0"])
    experiment: str
    method: str = Field(..., examples=["FedAvg", "FedProx", "FedPAW", "Local", "Cloud"])
    horizon: int = Field(..., ge=1, description="Prediction horizon H in seconds")
    rho: str = Field(..., description="Join ratio or range", examples=["1", "0.1-1"])
    feature_group: str = Field(..., examples=["FG6"])
    warmup_rounds: int = Field(..., ge=1)
    pa_layers: int = Field(..., ge=1)
    seed_index: int
    run_seed: int


class Run(RunBase):
    """Run registry row"""
    model_config = ConfigDict(from_attributes=True)

    status: str
    best_mae: Optional[float] = None
    execution_time_ms: Optional[int] = None
    error_message: Optional[str] = None
    created_at: datetime
    completed_at: Optional[datetime] = None


class RunSummary(BaseModel):
    """Outcome of a completed run (summary.json)"""
    run_id: str
    method: str
    rounds_run: int
    best_round: int
    best_mae: Optional[float] = None
    best_rmse: Optional[float] = None
    final_mae: Optional[float] = None
    final_rmse: Optional[float] = None
    parameter_count: int
    params_per_client: int
    stopped_early: bool = False
    per_client: dict = Field(default_factory=dict)

    @field_validator("per_client", mode="before")
    @classmethod
    def parse_per_client(cls, v):
        """Parse per-client metrics from a JSON string if needed"""
        if isinstance(v, str):
            return json.loads(v)
        return v


class WeightStats(BaseModel):
    """Aggregation weights of one top layer in one round"""
    layer: int
    min: float = Field(..., ge=0, le=1)
    max: float = Field(..., ge=0, le=1)
    mean: float = Field(..., ge=0, le=1)
    zero_fraction: float
    one_fraction: float
    degenerate: bool


class RoundEntry(BaseModel):
    """One line of a run's round log"""
    t: int
    method: str
    sampled: List[str]
    train_loss_mean: Optional[float] = None
    test_mae_mean: Optional[float] = None
    test_rmse_mean: Optional[float] = None
    wall_ms: float
    params_transferred: int
    params_per_client: int
    weights: Optional[List[WeightStats]] = None


# ==================== Response Schemas ====================

class HealthCheck(BaseModel):
    """Health check response"""
    status: str
    timestamp: datetime
    services: dict
