# typer imports
import typer
from typing import Annotated, Optional

# engine imports
from continual.analysis import analyze as analyze_runs
from continual.datasets import dataset_hash, read_dataset, write_dataset
from continual.errors import ConfigError, ContinualError
from continual.harness import CellOutcome, RunArtifacts, run_continual, run_grid, run_offline
from continual.model import load_checkpoint
from continual.schemas import ExperimentGrid, PolicyId, RunConfig, RunMetrics, ScenarioSpec
from continual.scoring import CHEAP_KINDS, ScoreKind, score_dataset, write_scores_csv
from continual.synthdata import class_names, generate_scenario
from continual.types import Rng, Sample, ScenarioKind

# other imports
import logging
import logging.config
from pathlib import Path
import uuid

cli = typer.Typer(help="Replay-buffer sample selection for continual semantic segmentation.",
                  no_args_is_help=True)

LOGGING_INI = Path(__file__).resolve().parent.parent / "logging.ini"


@cli.callback()
def configure(verbose: Annotated[bool, typer.Option("--verbose", "-v", help="Debug logging.")] = False):
    if LOGGING_INI.exists():
        logging.config.fileConfig(LOGGING_INI, disable_existing_loggers=False)
    else:
        logging.basicConfig(level=logging.INFO, format="%(levelname)-5.5s [%(name)s] %(message)s")
    if verbose:
        logging.getLogger("continual").setLevel(logging.DEBUG)


def _fail(message: str) -> None:
    typer.echo(f"error: {message}", err=True)
    raise typer.Exit(code=1)


def record_run(metrics: RunMetrics, run_dir: Path, grid_id: str | None = None) -> str:
    """Store a finished run and its per-step scalars in the run registry."""
    from database import crud, models, schemas
    from database.database import SessionLocal, engine

    models.Base.metadata.create_all(bind=engine)
    with SessionLocal() as db:
        db_run = crud.create_run(db, schemas.RunCreate(
            name=metrics.name, mode=metrics.mode, policy=metrics.policy, buffer_size=metrics.buffer_size,
            seed=metrics.seed, scenario_kind=metrics.scenario.value, run_dir=str(run_dir),
            dataset_hash=metrics.dataset_hash, grid_id=grid_id,
        ))
        for step in metrics.steps:
            values = {"all_miou": step.all_miou, "task_miou_average": step.task_miou_average,
                      "exclusive_miou": step.exclusive_miou, "recency_bias": step.recency_bias,
                      "exclusive_recency_bias": step.exclusive_recency_bias}
            values.update({f"subset_miou_{k}": v for k, v in step.subset_miou.items()})
            crud.add_step_metrics(db, db_run.id, step.step, values)
        failed = metrics.error is not None or metrics.invariant_violations
        error = metrics.error or ("; ".join(metrics.invariant_violations) or None)
        crud.finish_run(db, db_run.id, "failed" if failed else "finished", error)
        return db_run.id


# Generate a synthetic scenario and write it as a dataset directory
@cli.command("gen-data")
def gen_data(
    out: Annotated[Path, typer.Option(help="Dataset directory to create.")],
    scenario: Annotated[ScenarioKind, typer.Option(help="Scenario kind.")] = ScenarioKind.CLASS_INCREMENTAL,
    seed: Annotated[int, typer.Option(help="Data seed.")] = 0,
    config: Annotated[Optional[Path], typer.Option(help="ScenarioSpec JSON file; overrides --scenario.")] = None,
    train_per_task: Annotated[Optional[int], typer.Option(help="Training samples per task.")] = None,
    val_per_task: Annotated[Optional[int], typer.Option(help="Validation samples per task.")] = None,
):
    try:
        if config is not None:
            scenario_spec = ScenarioSpec.model_validate_json(config.read_text())
        else:
            builder = (ScenarioSpec.class_incremental if scenario == ScenarioKind.CLASS_INCREMENTAL
                       else ScenarioSpec.domain_incremental)
            scenario_spec = builder()
        overrides = {}
        if train_per_task is not None:
            overrides["train_per_task"] = [train_per_task] * scenario_spec.num_tasks
        if val_per_task is not None:
            overrides["val_per_task"] = [val_per_task] * scenario_spec.num_tasks
        if overrides:
            scenario_spec = ScenarioSpec.model_validate({**scenario_spec.model_dump(), **overrides})
        tasks = generate_scenario(scenario_spec, Rng(seed))
        write_dataset(out, tasks, scenario_spec.num_classes, class_names(scenario_spec), scenario_spec)
    except (ContinualError, ValueError, OSError) as exc:
        _fail(str(exc))
    typer.echo(f"{out} {dataset_hash(out)}")


# Run one continual (or offline) experiment
@cli.command("run")
def run(
    config: Annotated[Path, typer.Option(help="KEY=value run config file.")],
    data: Annotated[Path, typer.Option(help="Dataset directory written by gen-data.")],
    out: Annotated[Path, typer.Option(help="Run directory.")],
    seed: Annotated[Optional[int], typer.Option(help="Overrides SEED.")] = None,
    policy: Annotated[Optional[PolicyId], typer.Option(help="Overrides POLICY.")] = None,
    buffer_size: Annotated[Optional[int], typer.Option("--buffer-size", help="Overrides BUFFER_SIZE.")] = None,
    th: Annotated[Optional[float], typer.Option(help="Diversity threshold (div_class_bal).")] = None,
    cmp: Annotated[Optional[int], typer.Option(help="Gradient comparisons (gss).")] = None,
    rss_dim: Annotated[Optional[int], typer.Option("--rss-dim", help="Reduced dimension (rss).")] = None,
    direction: Annotated[Optional[str], typer.Option(help="min or max, for brisque/tv/ambivalent.")] = None,
    epochs: Annotated[Optional[int], typer.Option(help="Overrides EPOCHS.")] = None,
    offline: Annotated[bool, typer.Option(help="Joint training on all tasks instead.")] = False,
    record: Annotated[bool, typer.Option(help="Store the run in the registry database.")] = False,
):
    try:
        run_config = RunConfig.from_file(config, seed=seed, policy=policy, buffer_size=buffer_size, th=th,
                                         cmp=cmp, rss_dim=rss_dim, direction=direction, epochs=epochs)
        index, tasks = read_dataset(data)
        if index.num_classes != run_config.num_classes:
            raise ConfigError(f"dataset has {index.num_classes} classes, config says {run_config.num_classes}")
        driver = run_offline if offline else run_continual
        artifacts = driver(run_config, tasks, out, data_hash=dataset_hash(data), config_text=config.read_text())
    except (ContinualError, ValueError, OSError) as exc:
        _fail(str(exc))
    if record:
        typer.echo(f"recorded run {record_run(artifacts.metrics, artifacts.run_dir)}")
    _report(artifacts)


def _report(artifacts: RunArtifacts) -> None:
    final = artifacts.metrics.steps[-1] if artifacts.metrics.steps else None
    if final is not None:
        typer.echo(f"{artifacts.metrics.name}: final all-class mIoU {final.all_miou}")
    if not artifacts.ok:
        _fail(artifacts.metrics.error or "; ".join(artifacts.metrics.invariant_violations))


# Run every cell of an experiment grid
@cli.command("run-grid")
def run_grid_command(
    grid: Annotated[Path, typer.Option(help="ExperimentGrid JSON file.")],
    out: Annotated[Path, typer.Option(help="Grid output directory.")],
    record: Annotated[bool, typer.Option(help="Store every cell in the registry database.")] = False,
):
    try:
        experiment = ExperimentGrid.from_file(grid)
    except ConfigError as exc:
        _fail(str(exc))
    grid_id = f"{experiment.name}-{uuid.uuid4().hex[:8]}"
    failures: list[str] = []

    def recorder(outcome: CellOutcome) -> None:
        if not outcome.ok:
            failures.append(outcome.cell.label)
        if record and outcome.metrics is not None:
            record_run(outcome.metrics, outcome.run_dir, grid_id)

    try:
        summary = run_grid(experiment, out, recorder)
    except (ContinualError, ValueError, OSError) as exc:
        _fail(str(exc))
    typer.echo(str(summary))
    if record:
        typer.echo(f"recorded grid {grid_id}")
    if failures:
        _fail(f"{len(failures)} cell(s) failed: {', '.join(failures)}")


# Compare two runs on the same scenario
@cli.command("analyze")
def analyze(
    a: Annotated[Path, typer.Option("--a", help="First run directory.")],
    b: Annotated[Path, typer.Option("--b", help="Second run directory.")],
    out: Annotated[Path, typer.Option(help="Report directory.")],
):
    try:
        report = analyze_runs(a, b, out)
    except (ContinualError, ValueError, OSError) as exc:
        _fail(str(exc))
    for path in report.files:
        typer.echo(str(path))


# Score a dataset with a checkpoint
@cli.command("score")
def score(
    model: Annotated[Path, typer.Option(help="Checkpoint directory (model.bin + model.json).")],
    data: Annotated[Path, typer.Option(help="Dataset directory.")],
    out: Annotated[Path, typer.Option(help="CSV file to write.")],
    split: Annotated[str, typer.Option(help="train or val.")] = "train",
):
    try:
        checkpoint, _ = load_checkpoint(model)
        _, tasks = read_dataset(data)
        known = range(checkpoint.num_classes)
        samples = [Sample(s.id, s.image, s.full_labels.restricted_to(known), s.task_id)
                   for t in tasks for s in (t.train_samples if split == "train" else t.val_samples)]
        kinds = CHEAP_KINDS - {ScoreKind.EMBEDDING}
        scores = score_dataset(checkpoint, samples, kinds)
        write_scores_csv(scores, out)
    except (ContinualError, ValueError, OSError) as exc:
        _fail(str(exc))
    typer.echo(f"scored {len(scores)} samples -> {out}")


if __name__ == "__main__":
    cli()
