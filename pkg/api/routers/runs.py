"""
Run Results API Routes
"""

import json
import logging
import math
from pathlib import Path
from typing import List, Optional

from fastapi import APIRouter, Depends, HTTPException, Query, status
from sqlalchemy.orm import Session

from api.schemas import Run, RoundEntry, RunSummary
from database.models import Run as RunModel, get_db

logger = logging.getLogger(__name__)

router = APIRouter(
    prefix="/api/v1/runs",
    tags=["runs"],
    responses={404: {"description": "Run not found"}}
)


def _get_run(run_id: str, db: Session) -> RunModel:
    run = db.query(RunModel).filter(RunModel.run_id == run_id).first()
    if not run:
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail=f"Run {run_id} not found"
        )
    return run


def _finite_or_none(value):
    return None if isinstance(value, float) and not math.isfinite(value) else value


@router.get("/", response_model=List[Run])
async def list_runs(
    status_filter: Optional[str] = Query(None, alias="status", description="pending, running, completed or failed"),
    method: Optional[str] = Query(None, description="FedAvg, FedProx, FedPAW, Local or Cloud"),
    skip: int = 0,
    limit: int = 100,
    db: Session = Depends(get_db)
):
    """
    List registered runs

    - **status**: only runs in this state
    - **method**: only runs of this method
    """
    query = db.query(RunModel)
    if status_filter:
        query = query.filter(RunModel.status == status_filter)
    if method:
        query = query.filter(RunModel.method == method)
    return query.order_by(RunModel.run_id).offset(skip).limit(limit).all()


@router.get("/{run_id}", response_model=Run)
async def get_run(run_id: str, db: Session = Depends(get_db)):
    """Get one registry row"""
    return _get_run(run_id, db)


@router.get("/{run_id}/summary", response_model=RunSummary)
async def get_run_summary(run_id: str, db: Session = Depends(get_db)):
    """Best-round and final metrics of a completed run"""
    run = _get_run(run_id, db)
    result = run.result_dict()
    if result is None:
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail=f"Run {run_id} has no summary (status: {run.status})"
        )
    return result


@router.get("/{run_id}/rounds", response_model=List[RoundEntry])
async def get_run_rounds(
    run_id: str,
    start: int = Query(1, ge=1, description="First round"),
    end: Optional[int] = Query(None, ge=1, description="Last round"),
    db: Session = Depends(get_db)
):
    """Parsed round log of a run, optionally restricted to [start, end]"""
    run = _get_run(run_id, db)
    path = Path(run.run_dir) / "rounds.jsonl"
    if not path.is_file():
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail=f"Run {run_id} has no round log"
        )
    entries = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            entry = {k: _finite_or_none(v) for k, v in json.loads(line).items()}
            if entry["t"] < start or (end is not None and entry["t"] > end):
                continue
            entries.append(entry)
    logger.debug(f"Served {len(entries)} rounds of {run_id}")
    return entries
