"""Training, evaluation, the experiment matrix and its report.

A run directory holds::

    model.mtlc       final checkpoint
    result.json      the RunResult
    epochs.jsonl     one record per epoch: mean losses, learning rate, validation medians
    weights.jsonl    one record per update: step, strategy, task weights, losses
    DONE             written last; a matrix rerun skips directories that have it

A matrix directory holds one run directory per ``<tasks>-<strategy>/seed<k>``
and a ``failures.json`` listing cells that raised.
"""
from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
import csv
from dataclasses import asdict, dataclass, field, replace
import json
import logging
import math
from pathlib import Path
import sys
from textwrap import dedent
from typing import Any, Protocol

from jinja2 import DictLoader, Environment, select_autoescape
import numpy as np
from numpy.typing import NDArray

if sys.version_info[:2] <= (3, 10):
    import tomli as toml
else:
    import tomllib as toml

from . import __version__
from .autodiff import backward
from .balancer import STRATEGIES, STRATEGY_LABELS, BalancerConfig, make_balancer, parse_strategy
from .dataset import Batch, LoadedDataset, load_dataset, make_batch, write_tensor
from .errors import (
    DegenerateGeometry, DegenerateQuaternion, InsufficientPoints, InvalidConfig, InvalidInput,
    InvalidRequest, SolverFailure, TrainingDiverged,
)
from .geometry import Pose, speed_score
from . import heatmap
from .losses import ciou_loss_batch, pixel_mse, speed_loss_batch
from .network import (
    AdamState, Checkpoint, Network, NetworkConfig, TaskSet, build_network, save_checkpoint, sgd_adam_step,
)
from .pnp import indirect_pose

logger = logging.getLogger("Harness")

Array = NDArray[np.float64]

#: Worst-case SPEED given to samples whose pose could not be recovered.
SENTINEL_SCORE = math.pi + 1.0
RESULT_SCHEMA_VERSION = 1

#: Single-task, all-task, leave-one-out, add-one and the heatmap family.
TASK_MATRIX = ("P", "H", "PH", "PB", "PS", "PHB", "PHS", "PBS", "PHBS", "HB", "HS", "HBS")
PATHS = {"direct": "P", "indirect": "H"}


@dataclass(frozen=True)
class Hyperparameters:
    """Desk defaults; :meth:`full_scale` gives the full-scale schedule."""
    epochs: int = 10
    batch_size: int = 16
    lr: float = 5e-4
    lr_steps: tuple[float, ...] = (0.75, 0.90)
    lr_factor: float = 0.1
    tau: float = heatmap.TAU

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0 or not 0 < self.lr_factor <= 1:
            raise InvalidConfig(f"invalid hyperparameters {self}")
        if any(not 0 < f <= 1 for f in self.lr_steps):
            raise InvalidConfig(f"learning-rate steps must be fractions in (0, 1], got {self.lr_steps}")

    @classmethod
    def full_scale(cls) -> "Hyperparameters":
        return cls(epochs=40, batch_size=16, lr=5e-4, lr_steps=(0.75, 0.90), lr_factor=0.1)

    @classmethod
    def from_dict(cls, document: Mapping[str, Any]) -> "Hyperparameters":
        values = dict(document)
        if "lr_steps" in values:
            values["lr_steps"] = tuple(values["lr_steps"])
        try:
            return cls(**values)
        except TypeError as ex:
            raise InvalidConfig(f"unknown hyperparameter in {sorted(values)}: {ex}") from ex

    def step_epochs(self) -> list[int]:
        return [math.floor(f * self.epochs) for f in self.lr_steps]

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_factor ** sum(epoch >= boundary for boundary in self.step_epochs())

    def as_dict(self) -> dict[str, Any]:
        document = asdict(self)
        document["lr_steps"] = list(self.lr_steps)
        return document


@dataclass(frozen=True)
class ExperimentSpec:
    tasks: TaskSet
    strategy: str
    seed: int
    dataset: Path
    hyper: Hyperparameters = Hyperparameters()
    balancer: BalancerConfig = BalancerConfig()

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategy", parse_strategy(self.strategy))

    @property
    def cell(self) -> str:
        return f"{self.tasks}-{self.strategy}"

    def as_dict(self) -> dict[str, Any]:
        return {
            "tasks": str(self.tasks), "strategy": self.strategy, "seed": self.seed,
            "dataset": str(self.dataset), "hyper": self.hyper.as_dict(), "balancer": self.balancer.as_dict(),
        }


@dataclass(frozen=True)
class PathResult:
    """Per-sample SPEED scores of one pose path and their summary."""
    scores: list[float]
    failures: int = 0

    @property
    def n(self) -> int:
        return len(self.scores)

    @property
    def median(self) -> float:
        return float(np.median(self.scores))

    @property
    def iqr(self) -> float:
        q1, q3 = np.quantile(self.scores, [0.25, 0.75])
        return float(q3 - q1)

    def summary(self) -> dict[str, Any]:
        return {"median": self.median, "iqr": self.iqr, "failures": self.failures, "n": self.n}

    def as_dict(self) -> dict[str, Any]:
        return {"scores": self.scores, "failures": self.failures} | self.summary()

    @classmethod
    def from_dict(cls, document: Mapping[str, Any]) -> "PathResult":
        return cls([float(s) for s in document["scores"]], int(document["failures"]))

    @classmethod
    def pooled(cls, results: Iterable["PathResult"]) -> "PathResult":
        scores: list[float] = []
        failures = 0
        for r in results:
            scores.extend(r.scores)
            failures += r.failures
        return cls(scores, failures)


@dataclass(frozen=True)
class RunResult:
    cell: str
    tasks: str
    strategy: str
    seed: int
    split: str = "test"
    direct: PathResult | None = None
    indirect: PathResult | None = None
    #: Epoch-mean raw loss per task, plus the weighted "total".
    loss_curves: dict[str, list[float]] = field(default_factory=dict)
    weight_trajectory: list[dict[str, Any]] = field(default_factory=list)
    validation: list[dict[str, Any]] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)

    def path(self, name: str) -> PathResult | None:
        return self.direct if name == "direct" else self.indirect

    def as_dict(self) -> dict[str, Any]:
        return {
            "schema_version": RESULT_SCHEMA_VERSION,
            "cell": self.cell, "tasks": self.tasks, "strategy": self.strategy, "seed": self.seed,
            "split": self.split,
            "direct": self.direct.as_dict() if self.direct else None,
            "indirect": self.indirect.as_dict() if self.indirect else None,
            "loss_curves": self.loss_curves,
            "weight_trajectory": self.weight_trajectory,
            "validation": self.validation,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, document: Mapping[str, Any]) -> "RunResult":
        if document.get("schema_version") != RESULT_SCHEMA_VERSION:
            raise InvalidRequest(f"result schema {document.get('schema_version')!r} is not {RESULT_SCHEMA_VERSION}")
        return cls(
            cell=document["cell"], tasks=document["tasks"], strategy=document["strategy"],
            seed=int(document["seed"]), split=document.get("split", "test"),
            direct=PathResult.from_dict(document["direct"]) if document.get("direct") else None,
            indirect=PathResult.from_dict(document["indirect"]) if document.get("indirect") else None,
            loss_curves=document.get("loss_curves", {}),
            weight_trajectory=document.get("weight_trajectory", []),
            validation=document.get("validation", []),
            metadata=document.get("metadata", {}),
        )


def write_json(path: Path, document: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def read_result(path: Path) -> RunResult:
    return RunResult.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


class JsonLines:
    """Append-only JSON-lines log."""
    def __init__(self, path: Path | None) -> None:
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("", encoding="utf-8")

    def append(self, record: Mapping[str, Any]) -> None:
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as target:
                target.write(json.dumps(record, sort_keys=True) + "\n")


# Losses and evaluation

def task_losses(outputs: Mapping[str, Any], batch: Batch) -> dict[str, tuple[float, Array]]:
    """Raw loss and its gradient w.r.t. each head's output."""
    losses: dict[str, tuple[float, Array]] = {}
    for task, out in outputs.items():
        data = out.data
        match task:
            case "P":
                losses[task] = speed_loss_batch(data, batch.poses)
            case "H":
                losses[task] = pixel_mse(data, batch.heatmaps)
            case "B":
                losses[task] = ciou_loss_batch(data, batch.boxes)
            case "S":
                losses[task] = pixel_mse(data, batch.masks)
    return losses


class Predictor(Protocol):
    tasks: TaskSet

    def predict(self, images: Array) -> dict[str, Array]: ...


def _batches(n: int, size: int) -> Iterable[slice]:
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def _direct_score(output: Array, gt: Pose) -> float | None:
    try:
        return speed_score(Pose(output[:4], output[4:]), gt)
    except (DegenerateQuaternion, InvalidInput):
        return None


def _indirect_score(maps: Array, gt: Pose, dataset: LoadedDataset, tau: float) -> float | None:
    try:
        return speed_score(indirect_pose(maps, dataset.model, dataset.camera, tau), gt)
    except (InsufficientPoints, DegenerateGeometry, SolverFailure, InvalidInput, np.linalg.LinAlgError):
        return None


def score_records(
    predictor: Predictor,
    dataset: LoadedDataset,
    split: str,
    paths: Sequence[str],
    tau: float = heatmap.TAU,
    batch_size: int = 16,
) -> dict[str, PathResult]:
    """SPEED per sample on each requested path; failures get :data:`SENTINEL_SCORE`."""
    records = dataset[split]
    scores: dict[str, list[float]] = {p: [] for p in paths}
    failures = {p: 0 for p in paths}
    for window in _batches(len(records), batch_size):
        chunk = records[window]
        outputs = predictor.predict(np.stack([r.image for r in chunk])[:, None])
        for i, record in enumerate(chunk):
            for path in paths:
                if path == "direct":
                    score = _direct_score(outputs["P"][i], record.pose)
                else:
                    score = _indirect_score(outputs["H"][i], record.pose, dataset, tau)
                if score is None:
                    failures[path] += 1
                    score = SENTINEL_SCORE
                scores[path].append(score)
    return {p: PathResult(scores[p], failures[p]) for p in paths}


def available_paths(tasks: TaskSet) -> list[str]:
    return [path for path, head in PATHS.items() if head in tasks]


def evaluate(
    model: Checkpoint | Predictor,
    dataset: LoadedDataset,
    split: str = "test",
    paths: Sequence[str] | None = None,
    tau: float = heatmap.TAU,
) -> RunResult:
    """Median and IQR of per-sample SPEED for the direct and indirect paths."""
    predictor: Predictor = model.network if isinstance(model, Checkpoint) else model
    requested = list(paths) if paths is not None else available_paths(predictor.tasks)
    for path in requested:
        if path not in PATHS:
            raise InvalidRequest(f"unknown pose path {path!r}; use {sorted(PATHS)}")
        if PATHS[path] not in predictor.tasks:
            raise InvalidRequest(f"the {path} path needs head {PATHS[path]}, which tasks {predictor.tasks} lack")
    if not dataset[split]:
        raise InvalidRequest(f"split {split!r} is empty")
    found = score_records(predictor, dataset, split, requested, tau)
    for path, result in found.items():
        logger.info("%s %s: median %.4f IQR %.4f (%d failures of %d)", split, path, result.median, result.iqr, result.failures, result.n)
    tasks = str(predictor.tasks)
    return RunResult(
        cell=tasks, tasks=tasks, strategy="", seed=-1, split=split,
        direct=found.get("direct"), indirect=found.get("indirect"),
    )


# Training

def _seed_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    shuffle, weights = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(shuffle), np.random.default_rng(weights)


def _parameter_grads(network: Network) -> dict[str, Array | None]:
    return {name: tensor.grad for name, tensor in network.parameters.items()}


def _or_zeros(grad: Array | None, shape: tuple[int, ...]) -> Array:
    return np.zeros(shape) if grad is None else grad


def train_network(
    spec: ExperimentSpec,
    dataset: LoadedDataset,
    out: Path | None = None,
) -> tuple[Checkpoint, RunResult]:
    """The training loop; writes the run logs into ``out`` when given."""
    manifest = dataset.manifest
    hyper = spec.hyper
    config = NetworkConfig(input_size=manifest.image_size, d_mid=(manifest.d_min + manifest.d_max) / 2, seed=spec.seed)
    network = build_network(config, spec.tasks)
    shuffle_rng, weight_rng = _seed_streams(spec.seed)
    strategy = spec.strategy
    if len(spec.tasks) == 1 and strategy != "ew":
        logger.info("Single-task run %s: weighting is moot, strategy %s forced to EW", spec.tasks, strategy)
        strategy = "ew"
    balancer = make_balancer(strategy, list(spec.tasks), spec.balancer, weight_rng)
    adam = AdamState()
    records = dataset["train"]
    if not records:
        raise InvalidRequest("the training split is empty")
    weight_log = JsonLines(out / "weights.jsonl" if out else None)
    epoch_log = JsonLines(out / "epochs.jsonl" if out else None)
    curves: dict[str, list[float]] = {t: [] for t in spec.tasks} | {"total": []}
    trajectory: list[dict[str, Any]] = []
    validation: list[dict[str, Any]] = []
    tasks = list(spec.tasks)
    step = 0
    logger.info("Training %s seed %d: %d samples, %s", spec.cell, spec.seed, len(records), hyper)

    for epoch in range(hyper.epochs):
        lr = hyper.lr_at(epoch)
        balancer.begin_epoch(epoch)
        sums = dict.fromkeys(curves, 0.0)
        order = shuffle_rng.permutation(len(records))
        n_batches = 0
        for window in _batches(len(records), hyper.batch_size):
            batch = make_batch([records[i] for i in order[window]], manifest.sigma_px)
            outputs = network.forward(batch.images)
            losses = task_losses(outputs, batch)
            weights = dict(zip(tasks, (float(w) for w in balancer.iteration_weights())))
            raw = {t: losses[t][0] for t in tasks}
            total = sum(weights[t] * raw[t] for t in tasks)
            report = {"step": step, "epoch": epoch, "weights": weights, "losses": raw}
            if not math.isfinite(total):
                _diverged(out, report)
                raise TrainingDiverged(f"non-finite total loss {total!r} at step {step}", report)

            network.zero_grad()
            if balancer.needs_task_gradients:
                per_task: dict[str, dict[str, Array | None]] = {}
                for t in tasks:
                    network.zero_grad()
                    backward({outputs[t]: losses[t][1]})
                    per_task[t] = _parameter_grads(network)
                grads: dict[str, Array | None] = {}
                for name, tensor in network.parameters.items():
                    parts = [weights[t] * g for t in tasks if (g := per_task[t][name]) is not None]
                    grads[name] = sum(parts[1:], parts[0]) if parts else None
                shared = network.shared_parameter
                balancer.after_backward(
                    {t: _or_zeros(per_task[t][shared.name or ""], shared.shape) for t in tasks}, raw,
                )
            else:
                backward({outputs[t]: weights[t] * losses[t][1] for t in tasks})
                grads = _parameter_grads(network)
            try:
                sgd_adam_step(network.parameters, grads, adam, lr)
            except TrainingDiverged as ex:
                ex.report.update(report)
                _diverged(out, ex.report)
                raise

            record = {"step": step, "epoch": epoch, "strategy": strategy, "weights": weights, "losses": raw, "total": total}
            trajectory.append(record)
            weight_log.append(record)
            for t in tasks:
                sums[t] += raw[t]
            sums["total"] += total
            n_batches += 1
            step += 1

        means = {k: v / n_batches for k, v in sums.items()}
        for k, v in means.items():
            curves[k].append(v)
        balancer.end_epoch(means)
        epoch_record: dict[str, Any] = {"epoch": epoch, "lr": lr, "losses": means}
        if dataset["val"]:
            found = score_records(network, dataset, "val", available_paths(spec.tasks), hyper.tau, hyper.batch_size)
            epoch_record["validation"] = {p: r.summary() for p, r in found.items()}
            validation.append({"epoch": epoch} | epoch_record["validation"])
        epoch_log.append(epoch_record)
        logger.info("%s epoch %d: lr %.2g, losses %s", spec.cell, epoch, lr, {k: round(v, 5) for k, v in means.items()})

    checkpoint = Checkpoint(network, step, {"spec": spec.as_dict()})
    metadata = {
        "optimizer": "adam",
        "requested_strategy": spec.strategy,
        "effective_strategy": strategy,
        "balancer": balancer.metadata(),
        "parameter_counts": network.parameter_counts(),
        "hyper": hyper.as_dict(),
        "version": __version__,
        "steps": step,
    }
    result = RunResult(
        cell=spec.cell, tasks=str(spec.tasks), strategy=spec.strategy, seed=spec.seed,
        loss_curves=curves, weight_trajectory=trajectory, validation=validation, metadata=metadata,
    )
    return checkpoint, result


def _diverged(out: Path | None, report: Mapping[str, Any]) -> None:
    logger.error("Training diverged: %s", report)
    if out is not None:
        write_json(out / "diverged.json", dict(report))


def train(spec: ExperimentSpec, out: Path) -> tuple[Checkpoint, RunResult]:
    """Train, evaluate on the test split, and write the run directory."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(spec.dataset)
    checkpoint, result = train_network(spec, dataset, out)
    save_checkpoint(out / "model.mtlc", checkpoint)
    if dataset["test"]:
        tested = evaluate(checkpoint, dataset, "test", tau=spec.hyper.tau)
        result = replace(result, direct=tested.direct, indirect=tested.indirect)
    write_json(out / "result.json", result.as_dict())
    return checkpoint, result


# The experiment matrix

@dataclass(frozen=True)
class MatrixConfig:
    dataset: Path
    tasks: tuple[str, ...] = TASK_MATRIX
    strategies: tuple[str, ...] = STRATEGIES
    seeds: tuple[int, ...] = (0,)
    workers: int = 1
    hyper: Hyperparameters = Hyperparameters()
    balancer: BalancerConfig = BalancerConfig()

    @classmethod
    def from_toml(cls, path: Path) -> "MatrixConfig":
        """Read the ``[matrix]`` table, with optional ``[matrix.hyper]`` and ``[matrix.balancer]``."""
        with Path(path).open("rb") as source:
            document = toml.load(source)
        table = dict(document.get("matrix", {}))
        if "dataset" not in table:
            raise InvalidConfig(f"{path}: [matrix] needs a dataset")
        dataset = Path(table.pop("dataset"))
        if not dataset.is_absolute():
            dataset = Path(path).parent / dataset
        hyper = Hyperparameters.from_dict(table.pop("hyper", {}))
        try:
            balancer = BalancerConfig(**table.pop("balancer", {}))
            return cls(
                dataset=dataset,
                tasks=tuple(table.pop("tasks", TASK_MATRIX)),
                strategies=tuple(table.pop("strategies", STRATEGIES)),
                seeds=tuple(int(s) for s in table.pop("seeds", (0,))),
                workers=int(table.pop("workers", 1)),
                hyper=hyper,
                balancer=balancer,
                **table,
            )
        except TypeError as ex:
            raise InvalidConfig(f"{path}: unknown [matrix] setting: {ex}") from ex


def matrix_specs(config: MatrixConfig) -> list[ExperimentSpec]:
    """Every (task set, strategy, seed) cell; single-task cells use EW only."""
    specs: list[ExperimentSpec] = []
    seen: set[str] = set()
    strategies = [parse_strategy(s) for s in config.strategies]
    for text in config.tasks:
        tasks = TaskSet.parse(text)
        if str(tasks) in seen:
            logger.info("Task string %r repeats %s; skipped", text, tasks)
            continue
        seen.add(str(tasks))
        cell_strategies = strategies
        if len(tasks) == 1:
            if strategies != ["ew"]:
                logger.info("Single-task cell %s: weighting is moot, strategy forced to EW", tasks)
            cell_strategies = ["ew"]
        for strategy in cell_strategies:
            for seed in config.seeds:
                specs.append(ExperimentSpec(tasks, strategy, seed, config.dataset, config.hyper, config.balancer))
    return specs


def cell_dir(root: Path, spec: ExperimentSpec) -> Path:
    return root / spec.cell / f"seed{spec.seed}"


def run_cell(spec: ExperimentSpec, directory: Path) -> RunResult:
    """Train one cell unless its DONE marker exists."""
    if (directory / "DONE").exists():
        logger.info("Cell %s seed %d already complete", spec.cell, spec.seed)
        return read_result(directory / "result.json")
    _, result = train(spec, directory)
    (directory / "DONE").write_text(spec.cell + "\n", encoding="utf-8")
    return result


def _run_cell_job(job: tuple[ExperimentSpec, Path]) -> RunResult:
    spec, directory = job
    return run_cell(spec, directory)


@dataclass
class MatrixResults:
    results: dict[tuple[str, int], RunResult] = field(default_factory=dict)
    failures: dict[tuple[str, int], str] = field(default_factory=dict)


def run_matrix(config: MatrixConfig, out: Path) -> MatrixResults:
    """Run every cell, in parallel when ``config.workers > 1``; failing cells are recorded and skipped."""
    out = Path(out)
    specs = matrix_specs(config)
    logger.info("Matrix: %d cells into %s", len(specs), out)
    found = MatrixResults()

    def settle(spec: ExperimentSpec, outcome: RunResult | BaseException) -> None:
        key = (spec.cell, spec.seed)
        if isinstance(outcome, BaseException):
            logger.error("Cell %s seed %d failed: %s", spec.cell, spec.seed, outcome)
            found.failures[key] = f"{outcome.__class__.__name__}: {outcome}"
        else:
            found.results[key] = outcome

    jobs = [(spec, cell_dir(out, spec)) for spec in specs]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = [(spec, pool.submit(_run_cell_job, job)) for spec, job in zip(specs, jobs)]
            for spec, future in futures:
                error = future.exception()
                settle(spec, error if error is not None else future.result())
    else:
        for spec, job in zip(specs, jobs):
            try:
                settle(spec, _run_cell_job(job))
            except Exception as ex:
                settle(spec, ex)
    write_json(out / "failures.json", [
        {"cell": cell, "seed": seed, "error": message} for (cell, seed), message in sorted(found.failures.items())
    ])
    return found


# Reporting

def load_results(root: Path) -> dict[str, list[RunResult]]:
    """Completed runs under a matrix directory, grouped by cell."""
    cells: dict[str, list[RunResult]] = {}
    for done in sorted(Path(root).glob("*/seed*/DONE")):
        result = read_result(done.parent / "result.json")
        cells.setdefault(result.cell, []).append(result)
    return cells


@dataclass(frozen=True)
class CellSummary:
    cell: str
    tasks: str
    strategy: str
    seeds: int
    paths: dict[str, PathResult]

    @classmethod
    def from_runs(cls, runs: Sequence[RunResult]) -> "CellSummary":
        first = runs[0]
        paths = {}
        for name in PATHS:
            parts = [p for r in runs if (p := r.path(name)) is not None]
            if parts:
                paths[name] = PathResult.pooled(parts)
        return cls(first.cell, first.tasks, first.strategy, len(runs), paths)


def percent_change(baseline: float, model: float) -> float | None:
    """Positive when the model's score is lower than the baseline's; None for a zero baseline."""
    if baseline == 0:
        return None
    return 100.0 * (baseline - model) / baseline


def change_table(summaries: Mapping[str, CellSummary], path: str, baseline: str) -> list[dict[str, Any]]:
    base = summaries[baseline].paths[path]
    rows = []
    for cell, summary in sorted(summaries.items()):
        result = summary.paths.get(path)
        if result is None:
            continue
        rows.append({
            "cell": cell, "tasks": summary.tasks, "strategy": STRATEGY_LABELS.get(summary.strategy, summary.strategy),
            "seeds": summary.seeds, "median": result.median, "iqr": result.iqr,
            "failures": result.failures, "n": result.n,
            "change_pct": percent_change(base.median, result.median),
        })
    return rows


def strategy_summary(rows: Sequence[Mapping[str, Any]]) -> dict[str, float | None]:
    """Mean change per weighting strategy over the multi-task cells of one table."""
    grouped: dict[str, list[float]] = {}
    for row in rows:
        if len(row["tasks"]) < 2:
            continue
        values = grouped.setdefault(row["strategy"], [])
        if row["change_pct"] is not None:
            values.append(row["change_pct"])
    return {s: (float(np.mean(v)) if v else None) for s, v in grouped.items()}


report_templates = {
    "report.rst": dedent("""\
        {%- macro fmt(value) -%}{% if value is none %}undefined{% else %}{{ "%+.1f" | format(value) }}{% endif %}{%- endmacro -%}
        Pose accuracy by task set
        =========================

        Percent change in median SPEED against the baseline cell;
        positive means a lower (better) score.
        {% for table in tables %}

        {{ table.title }}
        {{ "-" * table.title | length }}

        Baseline: ``{{ table.baseline }}``

        .. csv-table::
           :header: "Cell", "Strategy", "Seeds", "Median", "IQR", "Failures", "Change %"

        {% for row in table.rows %}   "{{ row.cell }}", "{{ row.strategy }}", {{ row.seeds }}, {{ "%.4f" | format(row.median) }}, {{ "%.4f" | format(row.iqr) }}, {{ row.failures }}/{{ row.n }}, {{ fmt(row.change_pct) }}
        {% endfor %}

        Mean change by strategy (multi-task cells):
        {% for strategy, value in table.strategies.items() %}
        -   {{ strategy }}: {{ fmt(value) }}
        {%- endfor %}
        {% endfor %}
        """),
    "report.html": dedent("""\
        {%- macro fmt(value) -%}{% if value is none %}undefined{% else %}{{ "%+.1f" | format(value) }}{% endif %}{%- endmacro -%}
        <!DOCTYPE html>
        <html>
        <head><title>Pose accuracy by task set</title></head>
        <body>
        <h1>Pose accuracy by task set</h1>
        <p>Percent change in median SPEED against the baseline cell; positive means a lower (better) score.</p>
        {% for table in tables %}
        <h2>{{ table.title }}</h2>
        <p>Baseline: <code>{{ table.baseline }}</code></p>
        <table>
        <tr><th>Cell</th><th>Strategy</th><th>Seeds</th><th>Median</th><th>IQR</th><th>Failures</th><th>Change %</th></tr>
        {% for row in table.rows -%}
        <tr><td>{{ row.cell }}</td><td>{{ row.strategy }}</td><td>{{ row.seeds }}</td><td>{{ "%.4f" | format(row.median) }}</td><td>{{ "%.4f" | format(row.iqr) }}</td><td>{{ row.failures }}/{{ row.n }}</td><td>{{ fmt(row.change_pct) }}</td></tr>
        {% endfor -%}
        </table>
        <ul>
        {% for strategy, value in table.strategies.items() -%}
        <li>{{ strategy }}: {{ fmt(value) }}</li>
        {% endfor -%}
        </ul>
        {% endfor %}
        </body>
        </html>
        """),
}


def render_report(tables: Sequence[Mapping[str, Any]], markup: str = "rst") -> str:
    """Weave the change tables into an RST or HTML document."""
    name = f"report.{markup}"
    if name not in report_templates:
        raise InvalidRequest(f"unknown report markup {markup!r}; use rst or html")
    env = Environment(loader=DictLoader(report_templates), autoescape=select_autoescape())
    return env.get_template(name).render(tables=tables)


CSV_COLUMNS = ["cell", "tasks", "strategy", "seeds", "median", "iqr", "failures", "n", "change_pct"]


def _write_csv(path: Path, rows: Sequence[Mapping[str, Any]]) -> None:
    with path.open("w", newline="", encoding="utf-8") as target:
        writer = csv.DictWriter(target, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("undefined" if row[k] is None else row[k]) for k in CSV_COLUMNS})


def report(
    results: Path | Mapping[str, Sequence[RunResult]],
    out: Path,
    baseline: str = "P-ew",
    indirect_baseline: str = "H-ew",
    markup: str = "rst",
) -> dict[str, Any]:
    """Percent-change tables for both pose paths, as CSV, JSON and a woven document."""
    cells = load_results(results) if isinstance(results, Path) else dict(results)
    summaries = {cell: CellSummary.from_runs(runs) for cell, runs in cells.items() if runs}
    if baseline not in summaries or "direct" not in summaries[baseline].paths:
        raise InvalidRequest(f"baseline cell {baseline!r} with a direct path is not among {sorted(summaries)}")
    tables = []
    for path, base, title in (
        ("direct", baseline, "Direct pose (P head)"),
        ("indirect", indirect_baseline, "Indirect pose (H head and PnP)"),
    ):
        if base not in summaries or path not in summaries[base].paths:
            logger.warning("No %s baseline %r; %s table skipped", path, base, path)
            continue
        rows = change_table(summaries, path, base)
        tables.append({"path": path, "title": title, "baseline": base, "rows": rows, "strategies": strategy_summary(rows)})

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for table in tables:
        _write_csv(out / f"{table['path']}_change.csv", table["rows"])
    document = {
        "schema_version": RESULT_SCHEMA_VERSION,
        "cells": {
            cell: {"tasks": s.tasks, "strategy": s.strategy, "seeds": s.seeds} | {p: r.summary() for p, r in s.paths.items()}
            for cell, s in sorted(summaries.items())
        },
        "tables": tables,
    }
    write_json(out / "results.json", document)
    (out / f"report.{markup}").write_text(render_report(tables, markup), encoding="utf-8")
    logger.info("Report for %d cells written to %s", len(summaries), out)
    return document


# Qualitative inference

def predict(
    checkpoint: Checkpoint,
    dataset: LoadedDataset,
    index: int,
    out: Path,
    split: str = "test",
    tau: float = heatmap.TAU,
) -> dict[str, Any]:
    """Predictions of every head on one sample, beside its ground truth."""
    records = dataset[split]
    if not 0 <= index < len(records):
        raise InvalidRequest(f"sample index {index} outside the {split} split of {len(records)}")
    record = records[index]
    network = checkpoint.network
    outputs = network.predict(record.image[None, None])
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "image.mtlt", record.image)
    summary: dict[str, Any] = {
        "split": split, "index": index, "sample": record.index, "tasks": str(network.tasks),
        "ground_truth": {"pose": record.pose.as_dict(), "bbox": record.bbox.as_array().tolist()},
    }
    if "P" in outputs:
        score = _direct_score(outputs["P"][0], record.pose)
        summary["direct"] = {"raw": outputs["P"][0].tolist(), "speed": score}
    if "H" in outputs:
        maps = outputs["H"][0]
        write_tensor(out / "heatmaps_pred.mtlt", maps)
        write_tensor(out / "heatmaps_gt.mtlt", dataset.heatmaps(record).maps)
        decoded = heatmap.decode(maps, tau)
        summary["indirect"] = {
            "keypoints": decoded.uv.tolist(), "confidence": decoded.confidence.tolist(),
            "speed": _indirect_score(maps, record.pose, dataset, tau),
        }
    if "B" in outputs:
        summary["bbox"] = outputs["B"][0].tolist()
    if "S" in outputs:
        write_tensor(out / "mask_pred.mtlt", outputs["S"][0, 0])
        write_tensor(out / "mask_gt.mtlt", record.mask.astype(np.float64))
    write_json(out / "summary.json", summary)
    return summary
