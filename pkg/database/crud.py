from sqlalchemy.orm import Session

from . import models, schemas

# =========== RUNS ===========

def create_run(db: Session, run: schemas.RunCreate):
    db_run = models.Run(**run.model_dump())
    db.add(db_run)
    db.commit()
    db.refresh(db_run)
    return db_run


def finish_run(db: Session, run_id: str, status: str, error: str | None = None):
    db_run = get_run(db, run_id)
    if db_run is None:
        return None
    db_run.status = status
    db_run.error = error
    db.commit()
    db.refresh(db_run)
    return db_run


def get_run(db: Session, run_id: str):
    return db.query(models.Run).filter(models.Run.id == run_id).first()


def get_runs(db: Session, skip: int = 0, limit: int = 100):
    return db.query(models.Run).order_by(models.Run.name).offset(skip).limit(limit).all()


def get_runs_by_grid(db: Session, grid_id: str):
    return db.query(models.Run).filter(models.Run.grid_id == grid_id).order_by(models.Run.name).all()


def delete_run(db: Session, run_id: str):
    db.query(models.StepMetric).filter(models.StepMetric.run_id == run_id).delete()
    db.query(models.Run).filter(models.Run.id == run_id).delete()
    db.commit()
    return True

# =========== STEP METRICS ===========

def add_step_metrics(db: Session, run_id: str, step: int, values: dict[str, float | None]):
    rows = [models.StepMetric(run_id=run_id, step=step, name=name, value=value)
            for name, value in sorted(values.items())]
    db.add_all(rows)
    db.commit()
    return rows


def get_step_metrics(db: Session, run_id: str):
    return (db.query(models.StepMetric).filter(models.StepMetric.run_id == run_id)
            .order_by(models.StepMetric.step, models.StepMetric.name).all())
