"""Training, evaluation, matrix and report tests."""
import csv
import json
import math
from pathlib import Path
import shutil
import tempfile
import unittest
from unittest import mock

import numpy as np
import pytest

from mtlpose.balancer import BalancerConfig
from mtlpose.dataset import LoadedDataset, SynthConfig, generate_dataset, load_dataset, read_tensor
from mtlpose.errors import InvalidConfig, InvalidRequest
from mtlpose.harness import (
    SENTINEL_SCORE, TASK_MATRIX, ExperimentSpec, Hyperparameters, MatrixConfig, PathResult, RunResult,
    available_paths, evaluate, matrix_specs, percent_change, predict, render_report, report, run_cell,
    run_matrix, strategy_summary, train, train_network, write_json,
)
from mtlpose.network import TaskSet, encode_checkpoint

TINY = SynthConfig(n=20, seed=3, size=32, d_min=2.0, d_max=6.0)


class Oracle:
    """Predicts every sample's ground truth, or zeros when ``blind``."""
    def __init__(self, dataset: LoadedDataset, tasks: str = "PH", blind: bool = False) -> None:
        self.tasks = TaskSet.parse(tasks)
        self.dataset = dataset
        self.blind = blind
        self.lookup = {r.image.tobytes(): r for _, records in dataset for r in records}

    def predict(self, images: np.ndarray) -> dict[str, np.ndarray]:
        records = [self.lookup[image[0].tobytes()] for image in images]
        poses = np.stack([np.concatenate([r.pose.q, r.pose.t]) for r in records])
        maps = np.stack([self.dataset.heatmaps(r).maps for r in records])
        if self.blind:
            poses, maps = np.zeros_like(poses), np.zeros_like(maps)
        outputs = {"P": poses, "H": maps}
        return {t: outputs[t] for t in self.tasks}


def fake_result(cell: str, seed: int = 0, direct: list[float] | None = None, indirect: list[float] | None = None) -> RunResult:
    tasks, strategy = cell.split("-")
    return RunResult(
        cell=cell, tasks=tasks, strategy=strategy, seed=seed,
        direct=PathResult(direct) if direct is not None else None,
        indirect=PathResult(indirect) if indirect is not None else None,
    )


class TestPathResult(unittest.TestCase):
    def test_quantile_convention(self) -> None:
        result = PathResult([0.01 * k for k in range(1, 11)])
        self.assertAlmostEqual(result.median, 0.055, places=12)
        self.assertAlmostEqual(result.iqr, 0.045, places=12)

    def test_pooled(self) -> None:
        pooled = PathResult.pooled([PathResult([1.0, 2.0], 1), PathResult([3.0], 0)])
        self.assertEqual(pooled.scores, [1.0, 2.0, 3.0])
        self.assertEqual(pooled.failures, 1)
        self.assertEqual(pooled.summary()["n"], 3)

    def test_run_result_round_trip(self) -> None:
        result = fake_result("PH-dwa", 2, [0.1, 0.2], [0.3])
        back = RunResult.from_dict(json.loads(json.dumps(result.as_dict())))
        self.assertEqual(back, result)

    def test_schema_mismatch(self) -> None:
        document = fake_result("P-ew", direct=[0.1]).as_dict() | {"schema_version": 99}
        with self.assertRaises(InvalidRequest):
            RunResult.from_dict(document)


class TestConfiguration(unittest.TestCase):
    def test_lr_schedule(self) -> None:
        hyper = Hyperparameters(epochs=10, lr=1e-3)
        self.assertEqual(hyper.step_epochs(), [7, 9])
        self.assertEqual(hyper.lr_at(6), 1e-3)
        self.assertAlmostEqual(hyper.lr_at(7), 1e-4, places=15)
        self.assertAlmostEqual(hyper.lr_at(9), 1e-5, places=15)
        self.assertEqual(Hyperparameters.full_scale().step_epochs(), [30, 36])

    def test_invalid_hyperparameters(self) -> None:
        with self.assertRaises(InvalidConfig):
            Hyperparameters(epochs=0)
        with self.assertRaises(InvalidConfig):
            Hyperparameters.from_dict({"momentum": 0.9})

    def test_experiment_spec(self) -> None:
        spec = ExperimentSpec(TaskSet.parse("HP"), "DWA", 1, Path("data"))
        self.assertEqual(spec.cell, "PH-dwa")
        with self.assertRaises(InvalidConfig):
            ExperimentSpec(TaskSet.parse("P"), "uncertainty", 0, Path("data"))

    def test_matrix_toml(self) -> None:
        with tempfile.TemporaryDirectory() as work:
            path = Path(work) / "matrix.toml"
            path.write_text(
                '[matrix]\ndataset = "data"\ntasks = ["P", "PH"]\nstrategies = ["ew", "dwa"]\nseeds = [0, 1]\n'
                "[matrix.hyper]\nepochs = 3\n[matrix.balancer]\ntemperature = 1.5\n"
            )
            config = MatrixConfig.from_toml(path)
            self.assertEqual(config.dataset, Path(work) / "data")
            self.assertEqual(config.seeds, (0, 1))
            self.assertEqual(config.hyper.epochs, 3)
            self.assertEqual(config.balancer.temperature, 1.5)

            path.write_text('[matrix]\ndataset = "data"\ncolour = "blue"\n')
            with self.assertRaises(InvalidConfig):
                MatrixConfig.from_toml(path)
            path.write_text("[matrix]\nseeds = [0]\n")
            with self.assertRaises(InvalidConfig):
                MatrixConfig.from_toml(path)


class TestMatrixSpecs(unittest.TestCase):
    def test_default_matrix(self) -> None:
        specs = matrix_specs(MatrixConfig(dataset=Path("data")))
        cells = {s.cell for s in specs}
        self.assertEqual({s.split("-")[0] for s in cells}, set(TASK_MATRIX))
        self.assertEqual(len(TASK_MATRIX), 12)
        self.assertEqual(len(specs), 2 + 10 * 4)
        self.assertIn("P-ew", cells)
        self.assertNotIn("P-dwa", cells)

    def test_single_task_forced_to_ew(self) -> None:
        with self.assertLogs("Harness", "INFO") as logs:
            specs = matrix_specs(MatrixConfig(dataset=Path("d"), tasks=("H",), strategies=("dwa", "gradnorm")))
        self.assertEqual([s.cell for s in specs], ["H-ew"])
        self.assertTrue(any("forced to EW" in line for line in logs.output))

    def test_alias_is_one_cell(self) -> None:
        specs = matrix_specs(MatrixConfig(dataset=Path("d"), tasks=("HBS", "HSB"), strategies=("ew",), seeds=(0, 1)))
        self.assertEqual([(s.cell, s.seed) for s in specs], [("HBS-ew", 0), ("HBS-ew", 1)])

    def test_available_paths(self) -> None:
        self.assertEqual(available_paths(TaskSet.parse("PHBS")), ["direct", "indirect"])
        self.assertEqual(available_paths(TaskSet.parse("HS")), ["indirect"])


class TestRunCells(unittest.TestCase):
    def setUp(self) -> None:
        self.work = Path(tempfile.mkdtemp())

    def tearDown(self) -> None:
        shutil.rmtree(self.work)

    def test_done_marker_skips_training(self) -> None:
        spec = ExperimentSpec(TaskSet.parse("P"), "ew", 0, self.work / "missing")
        directory = self.work / "P-ew" / "seed0"
        stored = fake_result("P-ew", direct=[0.2, 0.4])
        write_json(directory / "result.json", stored.as_dict())
        (directory / "DONE").write_text("P-ew\n")
        self.assertEqual(run_cell(spec, directory), stored)

    def test_failing_cells_are_recorded(self) -> None:
        config = MatrixConfig(dataset=self.work / "missing", tasks=("P", "PH"), strategies=("ew",))
        found = run_matrix(config, self.work / "matrix")
        self.assertEqual(found.results, {})
        self.assertEqual(sorted(found.failures), [("P-ew", 0), ("PH-ew", 0)])
        failures = json.loads((self.work / "matrix" / "failures.json").read_text())
        self.assertEqual(len(failures), 2)
        self.assertTrue(failures[0]["error"].startswith("CorruptDataset"))

    def test_unexpected_exception_does_not_stop_the_matrix(self) -> None:
        def fake_train(spec: ExperimentSpec, out: Path) -> tuple[None, RunResult]:
            if str(spec.tasks) == "P":
                raise OSError(f"cannot write {out}")
            out.mkdir(parents=True, exist_ok=True)
            return None, fake_result(spec.cell, direct=[0.1])
        config = MatrixConfig(dataset=self.work / "data", tasks=("P", "PH"), strategies=("ew",))
        with mock.patch("mtlpose.harness.train", side_effect=fake_train), self.assertLogs("Harness", "ERROR"):
            found = run_matrix(config, self.work / "matrix")
        self.assertEqual(list(found.results), [("PH-ew", 0)])
        self.assertTrue(found.failures[("P-ew", 0)].startswith("OSError"))
        self.assertTrue((self.work / "matrix" / "PH-ew" / "seed0" / "DONE").exists())


class TestPercentChange(unittest.TestCase):
    def test_sign_convention(self) -> None:
        self.assertAlmostEqual(percent_change(0.052, 0.013), 75.0, places=9)
        self.assertEqual(percent_change(0.052, 0.052), 0.0)
        self.assertAlmostEqual(percent_change(0.052, 0.104), -100.0, places=9)
        self.assertIsNone(percent_change(0.0, 0.1))

    def test_strategy_summary_skips_single_task(self) -> None:
        rows = [
            {"tasks": "P", "strategy": "EW", "change_pct": 0.0},
            {"tasks": "PH", "strategy": "EW", "change_pct": 10.0},
            {"tasks": "PS", "strategy": "EW", "change_pct": -4.0},
            {"tasks": "PH", "strategy": "DWA", "change_pct": None},
        ]
        self.assertEqual(strategy_summary(rows), {"EW": 3.0, "DWA": None})


class TestReport(unittest.TestCase):
    def setUp(self) -> None:
        self.work = Path(tempfile.mkdtemp())
        self.cells = {
            "P-ew": [fake_result("P-ew", 0, [0.04, 0.06]), fake_result("P-ew", 1, [0.05])],
            "H-ew": [fake_result("H-ew", 0, indirect=[0.2, 0.3, 0.4])],
            "PH-dwa": [fake_result("PH-dwa", 0, [0.01, 0.02, 0.03], [0.1, 0.2, 0.3])],
        }

    def tearDown(self) -> None:
        shutil.rmtree(self.work)

    def test_tables(self) -> None:
        document = report(self.cells, self.work / "out")
        direct, indirect = document["tables"]
        by_cell = {row["cell"]: row for row in direct["rows"]}
        self.assertEqual(by_cell["P-ew"]["change_pct"], 0.0)
        self.assertEqual(by_cell["P-ew"]["seeds"], 2)
        self.assertAlmostEqual(by_cell["PH-dwa"]["change_pct"], 60.0, places=9)
        self.assertNotIn("H-ew", by_cell)
        self.assertAlmostEqual({r["cell"]: r for r in indirect["rows"]}["PH-dwa"]["change_pct"], 100 / 3, places=9)
        for name in ("direct_change.csv", "indirect_change.csv", "results.json", "report.rst"):
            self.assertTrue((self.work / "out" / name).exists(), name)
        with (self.work / "out" / "direct_change.csv").open() as source:
            self.assertEqual(len(list(csv.DictReader(source))), 2)

    def test_from_matrix_directory(self) -> None:
        root = self.work / "matrix"
        for cell, runs in self.cells.items():
            for run in runs:
                directory = root / cell / f"seed{run.seed}"
                write_json(directory / "result.json", run.as_dict())
                (directory / "DONE").write_text(cell)
        (root / "PB-ew" / "seed0").mkdir(parents=True)
        document = report(root, self.work / "out", markup="html")
        self.assertEqual(sorted(document["cells"]), ["H-ew", "P-ew", "PH-dwa"])
        self.assertIn("<table>", (self.work / "out" / "report.html").read_text())

    def test_missing_baseline(self) -> None:
        with self.assertRaises(InvalidRequest):
            report({"PH-dwa": self.cells["PH-dwa"]}, self.work / "out")

    def test_missing_indirect_baseline(self) -> None:
        cells = {k: v for k, v in self.cells.items() if k != "H-ew"}
        with self.assertLogs("Harness", "WARNING"):
            document = report(cells, self.work / "out")
        self.assertEqual([t["path"] for t in document["tables"]], ["direct"])

    def test_zero_baseline_is_undefined(self) -> None:
        cells = {"P-ew": [fake_result("P-ew", 0, [0.0, 0.0, 0.0])], "PH-ew": [fake_result("PH-ew", 0, [0.1])]}
        report(cells, self.work / "out")
        with (self.work / "out" / "direct_change.csv").open() as source:
            rows = {row["cell"]: row for row in csv.DictReader(source)}
        self.assertEqual(rows["PH-ew"]["change_pct"], "undefined")
        self.assertIn("undefined", (self.work / "out" / "report.rst").read_text())


def test_render_report_markups() -> None:
    rows = [{"cell": "P-ew", "strategy": "EW", "seeds": 1, "median": 0.05, "iqr": 0.01, "failures": 0, "n": 4, "change_pct": 0.0}]
    tables = [{"path": "direct", "title": "Direct", "baseline": "P-ew", "rows": rows, "strategies": {"EW": None}}]
    rst = render_report(tables, "rst")
    assert ".. csv-table::" in rst
    assert '"P-ew", "EW", 1, 0.0500, 0.0100, 0/4, +0.0' in rst
    html = render_report(tables, "html")
    assert "<td>P-ew</td>" in html
    with pytest.raises(InvalidRequest):
        render_report(tables, "markdown")


class TestWithDataset(unittest.TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        cls.work = Path(tempfile.mkdtemp())
        generate_dataset(TINY, cls.work / "data")
        cls.dataset = load_dataset(cls.work / "data")

    @classmethod
    def tearDownClass(cls) -> None:
        shutil.rmtree(cls.work)

    def spec(self, tasks: str, strategy: str = "ew", epochs: int = 1, seed: int = 0) -> ExperimentSpec:
        return ExperimentSpec(
            TaskSet.parse(tasks), strategy, seed, self.work / "data", Hyperparameters(epochs=epochs, batch_size=8),
        )

    def test_perfect_predictor(self) -> None:
        result = evaluate(Oracle(self.dataset), self.dataset, "val")
        self.assertEqual(result.direct.n, 4)
        self.assertEqual(result.direct.failures, 0)
        self.assertEqual(result.direct.median, pytest.approx(0.0, abs=1e-6))
        self.assertEqual(result.direct.iqr, pytest.approx(0.0, abs=1e-6))
        self.assertEqual(result.indirect.failures, 0)
        self.assertLess(result.indirect.median, 0.05)

    def test_all_failures_get_sentinel(self) -> None:
        result = evaluate(Oracle(self.dataset, blind=True), self.dataset, "val")
        for path in (result.direct, result.indirect):
            self.assertEqual(path.failures, 4)
            self.assertEqual(path.median, SENTINEL_SCORE)

    def test_missing_head(self) -> None:
        with self.assertRaises(InvalidRequest):
            evaluate(Oracle(self.dataset, "P"), self.dataset, "val", paths=["indirect"])
        with self.assertRaises(InvalidRequest):
            evaluate(Oracle(self.dataset), self.dataset, "val", paths=["sideways"])

    def test_only_available_paths(self) -> None:
        result = evaluate(Oracle(self.dataset, "H"), self.dataset, "test")
        self.assertIsNone(result.direct)
        self.assertEqual(result.indirect.n, 2)

    def test_equal_weighting_log(self) -> None:
        out = self.work / "ew-log"
        _, result = train_network(self.spec("PHBS"), self.dataset, out)
        self.assertEqual(set(result.loss_curves), {"P", "H", "B", "S", "total"})
        records = [json.loads(line) for line in (out / "weights.jsonl").read_text().splitlines()]
        self.assertEqual(len(records), 2)
        for record in records:
            self.assertEqual(record["weights"], {"P": 1.0, "H": 1.0, "B": 1.0, "S": 1.0})
            self.assertAlmostEqual(record["total"], sum(record["losses"].values()), places=12)
        epochs = [json.loads(line) for line in (out / "epochs.jsonl").read_text().splitlines()]
        self.assertEqual(set(epochs[0]["validation"]), {"direct", "indirect"})

    def test_single_task_run_records_effective_strategy(self) -> None:
        for strategy in ("dwa", "gradnorm"):
            with self.subTest(strategy=strategy), self.assertLogs("Harness", "INFO") as logs:
                _, result = train_network(self.spec("P", strategy), self.dataset)
                self.assertTrue(any("forced to EW" in line for line in logs.output))
                self.assertEqual(result.metadata["requested_strategy"], strategy)
                self.assertEqual(result.metadata["effective_strategy"], "ew")
                self.assertEqual(result.metadata["balancer"]["strategy"], "ew")
                self.assertEqual(result.strategy, strategy)

    def test_gradnorm_training(self) -> None:
        _, result = train_network(self.spec("PH", "gradnorm"), self.dataset)
        last = result.weight_trajectory[-1]["weights"]
        self.assertAlmostEqual(sum(last.values()), 2.0, places=9)
        self.assertTrue(all(w > 0 for w in last.values()))
        self.assertEqual(result.metadata["balancer"]["strategy"], "gradnorm")

    def test_fixed_seed_repeats(self) -> None:
        first, a = train_network(self.spec("PH", "rlw", epochs=2, seed=4), self.dataset)
        second, b = train_network(self.spec("PH", "rlw", epochs=2, seed=4), self.dataset)
        self.assertEqual(encode_checkpoint(first), encode_checkpoint(second))
        self.assertEqual(a, b)

    def test_train_writes_run_directory(self) -> None:
        out = self.work / "run"
        checkpoint, result = train(self.spec("PB"), out)
        for name in ("model.mtlc", "result.json", "epochs.jsonl", "weights.jsonl"):
            self.assertTrue((out / name).exists(), name)
        self.assertEqual(result.direct.n, 2)
        self.assertIsNone(result.indirect)
        self.assertEqual(checkpoint.step, 2)

    def test_predict_writes_files(self) -> None:
        checkpoint, _ = train_network(self.spec("PHBS"), self.dataset)
        out = self.work / "prediction"
        summary = predict(checkpoint, self.dataset, 1, out)
        self.assertEqual(summary["sample"], self.dataset["test"][1].index)
        self.assertEqual(read_tensor(out / "heatmaps_pred.mtlt").shape, (18, 32, 32))
        self.assertEqual(read_tensor(out / "mask_gt.mtlt").shape, (32, 32))
        with self.assertRaises(InvalidRequest):
            predict(checkpoint, self.dataset, 2, out)


def test_empty_split_rejected(tmp_path: Path) -> None:
    generate_dataset(SynthConfig(n=3, seed=1, size=32, d_min=2.0, d_max=6.0), tmp_path / "data")
    dataset = load_dataset(tmp_path / "data")
    with pytest.raises(InvalidRequest):
        evaluate(Oracle(dataset), dataset, "test")


@pytest.mark.slow
def test_smoke_training(tmp_path: Path) -> None:
    generate_dataset(SynthConfig(n=200, seed=1), tmp_path / "data")
    spec = ExperimentSpec(TaskSet.parse("P"), "ew", 1, tmp_path / "data", Hyperparameters(epochs=10))
    checkpoint, result = train(spec, tmp_path / "run")
    curve = result.loss_curves["P"]
    assert curve[-1] < 0.5 * curve[0]
    assert result.direct.median < 1.0
    again, repeat = train(spec, tmp_path / "again")
    assert encode_checkpoint(again) == encode_checkpoint(checkpoint)
    assert repeat == result


@pytest.mark.slow
def test_overfits_single_sample(tmp_path: Path) -> None:
    generate_dataset(SynthConfig(n=1, seed=2, size=32, d_min=2.0, d_max=6.0), tmp_path / "data")
    dataset = load_dataset(tmp_path / "data")
    spec = ExperimentSpec(
        TaskSet.parse("P"), "ew", 0, tmp_path / "data", Hyperparameters(epochs=500, batch_size=1, lr=1e-3),
    )
    checkpoint, _ = train_network(spec, dataset)
    result = evaluate(checkpoint, dataset, "train")
    assert result.direct.median < 0.05
    assert math.isfinite(result.direct.iqr)


def test_balancer_settings_reach_metadata() -> None:
    spec = ExperimentSpec(TaskSet.parse("PH"), "dwa", 0, Path("d"), balancer=BalancerConfig(temperature=1.0))
    assert spec.as_dict()["balancer"]["temperature"] == 1.0
