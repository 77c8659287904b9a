from fastapi.testclient import TestClient
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker
from sqlalchemy.pool import StaticPool
import pytest
from typing import Dict, Any

from app.main import app, get_db
from database import crud, schemas
from database.database import Base

engine = create_engine("sqlite://", connect_args={"check_same_thread": False}, poolclass=StaticPool)
TestingSessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)

# Dependency override pointing the app at the in-memory database
def override_get_db():
    db = TestingSessionLocal()
    try:
        yield db
    finally:
        db.close()

app.dependency_overrides[get_db] = override_get_db
client = TestClient(app)

# Helper function to return the expected validation error body
def response_helper(response: Any, query: str) -> Dict[str, Any]:
    """
    Build the expected 422 body for a query parameter that failed validation.

    Args:
        response (Any): The response object.
        query (str): The rejected query value.

    Returns:
        Dict[str, Any]: The expected error detail.
    """
    response_type = response.json()['detail'][0]['type']
    response_loc = response.json()['detail'][0]['loc']
    if response_type == "int_parsing":
        return {'detail': [{'type': response_type, 'loc': response_loc, 'msg': 'Input should be a valid integer, unable to parse string as an integer', 'input': query}]}

# Fresh tables for every test
@pytest.fixture(autouse=True)
def tables():
    Base.metadata.create_all(bind=engine)
    yield
    Base.metadata.drop_all(bind=engine)

# Fixture to record a run with two steps and return its id
@pytest.fixture
def run_id():
    db = TestingSessionLocal()
    try:
        run = crud.create_run(db, schemas.RunCreate(
            name="random_M64_s0", policy="random", buffer_size=64, seed=0,
            scenario_kind="class_incremental", run_dir="out/random_M64_s0", dataset_hash="ab" * 32,
            grid_id="grid-1"))
        crud.add_step_metrics(db, run.id, 0, {"all_miou": 0.5, "recency_bias": None})
        crud.add_step_metrics(db, run.id, 1, {"all_miou": 0.4, "recency_bias": 0.2})
        crud.finish_run(db, run.id, "finished")
        return run.id
    finally:
        db.close()

# Test the root endpoint
def test_read_root():
    response = client.get("/")
    assert response.status_code == 200
    body = response.json()
    assert body["service"] == "replay-selection"
    assert "rss" in body["policies"]

# Test the policies endpoint
def test_read_policies():
    response = client.get("/policies")
    assert response.status_code == 200
    policies = {p["id"]: p["params"] for p in response.json()}
    assert len(policies) == 18
    assert policies["gss"] == {"cmp": 5}
    assert policies["rss"] == {"d": 2}
    assert policies["div_class_bal"] == {"th": 0.6}
    assert policies["tv_image"] == {"direction": "max"}
    assert policies["random"] == {}

# Test listing runs
def test_read_runs(run_id):
    response = client.get("/runs")
    assert response.status_code == 200
    assert [r["id"] for r in response.json()] == [run_id]
    assert response.json()[0]["status"] == "finished"

# Test listing runs with an empty table
def test_read_runs_empty():
    response = client.get("/runs")
    assert response.status_code == 200
    assert response.json() == []

# Test listing runs with a non-integer skip
def test_read_runs_with_invalid_skip():
    response = client.get("/runs?skip=abc")
    assert response.status_code == 422
    assert response.json() == response_helper(response, "abc")

# Test reading a run with its steps
def test_read_run(run_id):
    response = client.get(f"/runs/{run_id}")
    assert response.status_code == 200
    body = response.json()
    assert body["name"] == "random_M64_s0"
    assert len(body["steps"]) == 4
    assert [s["step"] for s in body["steps"]] == [0, 0, 1, 1]
    assert {"name": "recency_bias", "value": None} in [{k: s[k] for k in ("name", "value")} for s in body["steps"]]

# Test reading a run that does not exist
def test_read_run_not_found():
    response = client.get("/runs/missing")
    assert response.status_code == 404
    assert response.json() == {"detail": "Run not found"}

# Test reading the runs of a grid
def test_read_grid(run_id):
    response = client.get("/grids/grid-1")
    assert response.status_code == 200
    assert [r["id"] for r in response.json()] == [run_id]

# Test reading a grid that does not exist
def test_read_grid_not_found():
    response = client.get("/grids/none")
    assert response.status_code == 404
    assert response.json() == {"detail": "Grid not found"}

# Test deleting a run
def test_delete_run(run_id):
    response = client.delete(f"/runs/{run_id}")
    assert response.status_code == 200
    assert response.json() == {"message": "Run deleted successfully"}
    assert client.get(f"/runs/{run_id}").status_code == 404
    db = TestingSessionLocal()
    try:
        assert crud.get_step_metrics(db, run_id) == []
    finally:
        db.close()

# Test deleting a run that does not exist
def test_delete_run_not_found():
    response = client.delete("/runs/missing")
    assert response.status_code == 404
    assert response.json() == {"detail": "Run not found"}
