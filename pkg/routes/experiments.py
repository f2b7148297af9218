# routes/experiments.py
# Launch scenario runs in the background and browse the run registry

import json
import logging
from typing import Any, Dict, Optional

from fastapi import APIRouter, BackgroundTasks, Depends, HTTPException, Query
from pydantic import BaseModel, Field
from sqlalchemy.orm import Session, sessionmaker

from config import settings
from database import SessionLocal, get_db
from models.experiment_run import ExperimentRun
from schemas.experiment import scenario_config
from services.evaluation import config_hash
from services.experiment_service import new_run_id, run_experiment
from utils.responses import paginated_response, success_response

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/experiments", tags=["Experiments"])


# ===== SCHEMAS =====

class LaunchExperimentRequest(BaseModel):
    scenario: str
    overrides: Dict[str, Any] = Field(default_factory=dict)
    output_dir: Optional[str] = None


# ===== HELPERS =====

def _run_in_background(config, output_dir: Optional[str], run_id: str, session_factory=SessionLocal):
    """Background task body; opens its own session because the request's is closed by then"""
    db = session_factory()
    try:
        run_experiment(config, output_dir=output_dir, db=db, run_id=run_id)
    except Exception as e:
        # run_experiment already marked the row failed
        logger.error(f"❌ Background run {run_id} failed: {str(e)}")
    finally:
        db.close()


# ===== ENDPOINTS =====

@router.post("", status_code=202)
def launch_experiment(
    payload: LaunchExperimentRequest,
    background_tasks: BackgroundTasks,
    db: Session = Depends(get_db),
):
    """Validate a scenario (plus overrides), register the run and start it"""
    config = scenario_config(payload.scenario, payload.overrides)
    run_id = new_run_id(config)
    db.add(ExperimentRun(
        run_id=run_id,
        scenario=config.scenario,
        config_hash=config_hash(config.model_dump(mode="json")),
        status="pending",
        seeds=json.dumps(config.seeds),
        output_dir=payload.output_dir or settings.OUTPUT_DIR,
    ))
    db.commit()
    background_tasks.add_task(
        _run_in_background, config, payload.output_dir, run_id, sessionmaker(bind=db.get_bind())
    )
    logger.info(f"🚀 Queued run {run_id} ({payload.scenario})")
    return success_response({"run_id": run_id, "status": "pending"}, "Experiment queued", status_code=202)


@router.get("")
def list_experiments(
    page: int = Query(1, ge=1),
    per_page: int = Query(settings.DEFAULT_PAGE_SIZE, ge=1, le=settings.MAX_PAGE_SIZE),
    status_filter: Optional[str] = Query(None, alias="status"),
    db: Session = Depends(get_db),
):
    query = db.query(ExperimentRun)
    if status_filter:
        query = query.filter(ExperimentRun.status == status_filter)
    total = query.count()
    runs = (
        query.order_by(ExperimentRun.created_at.desc())
        .offset((page - 1) * per_page)
        .limit(per_page)
        .all()
    )
    return paginated_response([r.to_dict() for r in runs], page, per_page, total)


@router.get("/{run_id}")
def get_experiment(run_id: str, db: Session = Depends(get_db)):
    run = db.query(ExperimentRun).filter(ExperimentRun.run_id == run_id).first()
    if not run:
        raise HTTPException(status_code=404, detail="Run not found")
    return success_response(run.to_dict(with_cells=True))
