from pydantic import BaseModel, ConfigDict


class StepMetricBase(BaseModel):
    step: int
    name: str
    value: float | None = None


class StepMetric(StepMetricBase):
    id: int
    run_id: str

    model_config = ConfigDict(from_attributes=True)


class RunBase(BaseModel):
    name: str
    mode: str = "continual"
    policy: str
    buffer_size: int
    seed: int
    scenario_kind: str
    run_dir: str
    dataset_hash: str
    grid_id: str | None = None


class RunCreate(RunBase):
    pass


class Run(RunBase):
    id: str
    status: str
    error: str | None = None

    model_config = ConfigDict(from_attributes=True)


class RunDetail(Run):
    steps: list[StepMetric] = []


class PolicyInfo(BaseModel):
    id: str
    params: dict[str, float | int | str | None] = {}
