"""
FedPAW Experiment Results - Main API Application
"""

import logging
from contextlib import asynccontextmanager
from datetime import datetime

from fastapi import Depends, FastAPI
from fastapi.middleware.cors import CORSMiddleware
from sqlalchemy import func
from sqlalchemy.orm import Session

from database.models import DATABASE_URL, Run, get_db, init_db
from engine.python.config import LOG_FORMAT

# Configure logging
logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    """
    Startup and shutdown events
    """
    logger.info(f"Starting FedPAW results API on {DATABASE_URL}...")
    try:
        init_db()
    except Exception as e:
        logger.error(f"Run registry unavailable: {e}")
    yield
    logger.info("Shutting down FedPAW results API...")


app = FastAPI(
    title="FedPAW Experiment Results",
    description="""
    Read-only access to personalized federated speed-prediction runs.

    ## Features

    * **Run registry**: status and outcome of every run in an experiment matrix
    * **Round logs**: per-round loss, test MAE/RMSE, aggregation-weight statistics
    * **Summaries**: best-round metrics and parameter accounting

    Training is started from the command line, never over HTTP.
    """,
    version="1.0.0",
    license_info={
        "name": "MIT",
    },
    lifespan=lifespan
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.get("/", tags=["Root"])
async def root():
    """
    Root endpoint - API information
    """
    return {
        "message": "FedPAW Experiment Results API",
        "version": "1.0.0",
        "status": "running",
        "timestamp": datetime.utcnow().isoformat(),
        "documentation": "/docs",
    }


@app.get("/health", tags=["Health"])
async def health_check(db: Session = Depends(get_db)):
    """
    Health check endpoint for monitoring, with run counts per status
    """
    counts = dict(db.query(Run.status, func.count(Run.run_id)).group_by(Run.status).all())
    return {
        "status": "healthy",
        "timestamp": datetime.utcnow().isoformat(),
        "services": {
            "api": "running",
            "registry": DATABASE_URL,
        },
        "runs": counts,
    }


from api.routers import runs  # noqa: E402
app.include_router(runs.router)


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(
        "api.main:app",
        host="0.0.0.0",
        port=8000,
        reload=True,
        log_level="info"
    )
