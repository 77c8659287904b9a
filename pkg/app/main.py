# fastapi imports
from fastapi import FastAPI, Depends, HTTPException
from fastapi.middleware.cors import CORSMiddleware

# database imports
from sqlalchemy.orm import Session
from database import crud, models, schemas
from database.database import SessionLocal, engine

# engine imports
import continual
from continual.schemas import PolicyId, SelectionPolicy

models.Base.metadata.create_all(bind=engine)

app = FastAPI(title="replay-selection", version=continual.__version__)

# Dependency
def get_db():
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()

# CORS
origins = [
    "http://localhost",
    "http://localhost:8080",
]

app.add_middleware(
    CORSMiddleware,
    allow_origins=origins,
    allow_credentials=True,
    allow_methods=["GET", "DELETE"],
    allow_headers=["*"],
)


# root endpoint
@app.get("/")
def read_root():
    return {"service": "replay-selection", "version": continual.__version__,
            "policies": [p.value for p in PolicyId]}

# List the selection policies with their default parameters
@app.get("/policies", response_model=list[schemas.PolicyInfo])
def read_policies():
    """
    List every sample-selection policy.

    Returns:
        list: policy ids with the parameters each one uses, at their defaults.
    """
    return [schemas.PolicyInfo(id=p.value, params=SelectionPolicy(id=p).params()) for p in PolicyId]

# Retrieve a list of runs
@app.get("/runs", response_model=list[schemas.Run])
def read_runs(skip: int = 0, limit: int = 100, db: Session = Depends(get_db)):
    """
    Retrieve a list of recorded runs.

    Parameters:
        - skip (int): The number of runs to skip.
        - limit (int): The maximum number of runs to retrieve.
        - db (Session): The database session.

    Returns:
        list: A list of runs.
    """
    return crud.get_runs(db, skip=skip, limit=limit)

# Retrieve a run by its ID
@app.get("/runs/{run_id}", response_model=schemas.RunDetail)
def read_run(run_id: str, db: Session = Depends(get_db)):
    """
    Retrieve a run and its per-step metrics.

    Raises:
        HTTPException: If the run is not found.
    """
    db_run = crud.get_run(db, run_id)
    if db_run is None:
        raise HTTPException(status_code=404, detail="Run not found")
    return db_run

# Retrieve the runs of a grid
@app.get("/grids/{grid_id}", response_model=list[schemas.Run])
def read_grid(grid_id: str, db: Session = Depends(get_db)):
    runs = crud.get_runs_by_grid(db, grid_id)
    if not runs:
        raise HTTPException(status_code=404, detail="Grid not found")
    return runs

# Delete a run record; its artifacts on disk are left alone
@app.delete("/runs/{run_id}")
def delete_run(run_id: str, db: Session = Depends(get_db)):
    """
    Delete a run record by its ID.

    Raises:
        HTTPException: If the run is not found.
    """
    if crud.get_run(db, run_id) is None:
        raise HTTPException(status_code=404, detail="Run not found")
    crud.delete_run(db, run_id)
    return {"message": "Run deleted successfully"}
