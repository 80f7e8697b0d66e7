"""
Run Registry Models using SQLAlchemy
"""

import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Dict, Iterable, List, Optional

from dotenv import load_dotenv
from sqlalchemy import Column, DateTime, Float, Integer, String, Text, create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import Session, declarative_base, sessionmaker

from engine.python.config import Settings

load_dotenv()

logger = logging.getLogger(__name__)

Base = declarative_base()

PENDING = "pending"
RUNNING = "running"
COMPLETED = "completed"
FAILED = "failed"


class Run(Base):
    """One cell of an experiment matrix and its outcome"""
    __tablename__ = "runs"

    run_id = Column(String, primary_key=True, index=True)
    experiment = Column(String, nullable=False, index=True)
    method = Column(String, nullable=False, index=True)  # "FedAvg", "FedProx", "FedPAW", "Local", "Cloud"
    horizon = Column(Integer, nullable=False)
    rho = Column(String, nullable=False)  # "1" or "0.1-1"
    feature_group = Column(String, nullable=False)
    warmup_rounds = Column(Integer, nullable=False)
    pa_layers = Column(Integer, nullable=False)
    seed_index = Column(Integer, nullable=False)
    run_seed = Column(Integer, nullable=False)
    run_dir = Column(String, nullable=False)
    status = Column(String, default=PENDING, index=True)  # "pending", "running", "completed", "failed"
    config = Column(Text)  # JSON string of the RunSpec
    result = Column(Text, nullable=True)  # JSON string of summary.json
    best_mae = Column(Float, nullable=True)
    execution_time_ms = Column(Integer, nullable=True)
    error_message = Column(Text, nullable=True)
    created_at = Column(DateTime, default=datetime.utcnow)
    completed_at = Column(DateTime, nullable=True)

    def result_dict(self) -> Optional[dict]:
        return json.loads(self.result) if self.result else None

    def __repr__(self):
        return f"<Run(id={self.run_id}, status={self.status})>"


def registry_url(output_root) -> str:
    return f"sqlite:///{Path(output_root) / 'registry.db'}"


def make_engine(url: str) -> Engine:
    return create_engine(
        url,
        connect_args={"check_same_thread": False} if url.startswith("sqlite") else {},
    )


def init_db(bind: Optional[Engine] = None) -> None:
    """Initialize database - create all tables"""
    Base.metadata.create_all(bind=bind or engine)
    logger.info("Run registry tables ready")


class RunRegistry:
    """
    Resume manifest of one experiment output directory

    Only the harness's parent process writes; workers never touch it.
    """

    def __init__(self, url: str):
        self.engine = make_engine(url)
        init_db(self.engine)
        self._sessions = sessionmaker(autocommit=False, autoflush=False, bind=self.engine)

    @classmethod
    def for_output(cls, output_root) -> "RunRegistry":
        Path(output_root).mkdir(parents=True, exist_ok=True)
        return cls(registry_url(output_root))

    def session(self) -> Session:
        return self._sessions()

    def register(self, experiment: str, entries: Iterable[Dict]) -> None:
        """Insert missing runs as pending; existing rows keep their status"""
        with self.session() as db:
            for entry in entries:
                if db.get(Run, entry["run_id"]) is None:
                    db.add(Run(experiment=experiment, status=PENDING, **entry))
            db.commit()

    def completed_ids(self) -> List[str]:
        with self.session() as db:
            return [r.run_id for r in db.query(Run).filter(Run.status == COMPLETED)]

    def mark_running(self, run_id: str) -> None:
        self._update(run_id, status=RUNNING, error_message=None)

    def mark_completed(self, run_id: str, result: dict, execution_time_ms: int) -> None:
        self._update(
            run_id,
            status=COMPLETED,
            result=json.dumps(result, sort_keys=True),
            best_mae=result.get("best_mae"),
            execution_time_ms=execution_time_ms,
            completed_at=datetime.utcnow(),
        )

    def mark_failed(self, run_id: str, error: str) -> None:
        self._update(run_id, status=FAILED, error_message=error, completed_at=datetime.utcnow())

    def runs(self, status: Optional[str] = None) -> List[Run]:
        with self.session() as db:
            query = db.query(Run)
            if status:
                query = query.filter(Run.status == status)
            rows = query.order_by(Run.run_id).all()
            db.expunge_all()
            return rows

    def _update(self, run_id: str, **values) -> None:
        with self.session() as db:
            run = db.get(Run, run_id)
            if run is None:
                raise KeyError(run_id)
            for key, value in values.items():
                setattr(run, key, value)
            db.commit()


def api_database_url(settings: Optional[Settings] = None) -> str:
    """FEDPAW_DATABASE_URL, else the registry under FEDPAW_OUT (default ./runs)"""
    settings = settings or Settings()
    return settings.database_url or registry_url(settings.out or "runs")


# Database connection used by the API
DATABASE_URL = api_database_url()
engine = make_engine(DATABASE_URL)
SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)


def get_db():
    """
    Dependency to get database session
    Use in FastAPI routes: db: Session = Depends(get_db)
    """
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
    init_db()
    logger.info(f"Registry at {DATABASE_URL}")
