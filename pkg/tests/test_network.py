"""Network construction, optimizer and checkpoint tests."""
from pathlib import Path
import unittest

import numpy as np
import pytest

from mtlpose.autodiff import as_tensor, parameter
from mtlpose.errors import CorruptCheckpoint, InvalidConfig, InvalidRequest, ShapeMismatch, TrainingDiverged
from mtlpose.network import (
    AdamState, Checkpoint, Network, NetworkConfig, TaskSet, build_network, decode_checkpoint,
    encode_checkpoint, initialize, load_checkpoint, save_checkpoint, sgd_adam_step, strip_auxiliary_heads,
)

TINY = NetworkConfig(input_size=16, channels=(4, 8), strides=(1, 2), head_channels=4, d_mid=5.0, seed=3)


def images(n: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(size=(n, 1, 16, 16))


class TestTaskSet(unittest.TestCase):
    def test_canonical_order(self) -> None:
        self.assertEqual(str(TaskSet.parse("hsb")), "HBS")
        self.assertEqual(TaskSet.parse("SBHP"), TaskSet.parse("PHBS"))
        self.assertIn("B", TaskSet.parse("PB"))
        self.assertEqual(len(TaskSet.parse("PH")), 2)

    def test_rejects_bad_sets(self) -> None:
        for text in ("B", "BS", "PX", "PP"):
            with self.subTest(text=text), self.assertRaises(InvalidConfig):
                TaskSet.parse(text)


class TestNetworkConfig(unittest.TestCase):
    def test_rejects_indivisible_size(self) -> None:
        with self.assertRaises(InvalidConfig):
            NetworkConfig(input_size=15, channels=(4, 8), strides=(1, 2))

    def test_rejects_bad_stride(self) -> None:
        with self.assertRaises(InvalidConfig):
            NetworkConfig(input_size=16, channels=(4,), strides=(3,))

    def test_dict_round_trip(self) -> None:
        self.assertEqual(NetworkConfig.from_dict(TINY.as_dict()), TINY)


class TestInitialization(unittest.TestCase):
    def test_blocks_independent_of_other_heads(self) -> None:
        alone = initialize(TINY, TaskSet.parse("P"))
        full = initialize(TINY, TaskSet.parse("PHBS"))
        for name, value in alone.items():
            np.testing.assert_array_equal(value, full[name], err_msg=name)

    def test_seed_changes_weights(self) -> None:
        a = initialize(TINY, TaskSet.parse("P"))
        b = initialize(NetworkConfig.from_dict(TINY.as_dict() | {"seed": 4}), TaskSet.parse("P"))
        self.assertFalse(np.array_equal(a["trunk.conv0.w"], b["trunk.conv0.w"]))

    def test_biases_start_at_zero(self) -> None:
        for name, value in initialize(TINY, TaskSet.parse("PHBS")).items():
            if name.endswith(".b"):
                self.assertFalse(value.any(), name)

    def test_parameter_mismatch(self) -> None:
        values = initialize(TINY, TaskSet.parse("P"))
        with self.assertRaises(InvalidConfig):
            Network(TINY, TaskSet.parse("PB"), values)


class TestForward(unittest.TestCase):
    def setUp(self) -> None:
        self.network = build_network(TINY, TaskSet.parse("PHBS"))

    def test_four_head_groups(self) -> None:
        counts = self.network.parameter_counts()
        self.assertEqual(set(counts), {"trunk", "P", "H", "B", "S", "total"})
        self.assertEqual(counts["total"], sum(t.data.size for t in self.network.parameters.values()))
        self.assertEqual(counts["total"], sum(v for k, v in counts.items() if k != "total"))

    def test_output_shapes(self) -> None:
        outputs = self.network.predict(images(2))
        self.assertEqual(outputs["P"].shape, (2, 7))
        self.assertEqual(outputs["H"].shape, (2, 18, 16, 16))
        self.assertEqual(outputs["B"].shape, (2, 4))
        self.assertEqual(outputs["S"].shape, (2, 1, 16, 16))
        for value in outputs.values():
            self.assertTrue(np.all(np.isfinite(value)))

    def test_output_ranges(self) -> None:
        outputs = self.network.predict(images(3))
        for task in "HS":
            self.assertTrue(np.all((outputs[task] > 0) & (outputs[task] < 1)))
        self.assertTrue(np.all(outputs["P"][:, 6] > 0))
        self.assertTrue(np.all(outputs["B"][:, 2:] > 0))

    def test_switching_heads_off_keeps_trunk_and_heads(self) -> None:
        batch = images(2, seed=9)
        full = self.network.predict(batch)
        features = self.network.trunk(as_tensor(batch)).data
        for tasks in ("P", "PH", "PB", "HS"):
            network = build_network(TINY, TaskSet.parse(tasks))
            np.testing.assert_array_equal(network.trunk(as_tensor(batch)).data, features, err_msg=tasks)
            for task, value in network.predict(batch).items():
                np.testing.assert_array_equal(value, full[task], err_msg=f"{tasks} {task}")

    def test_heatmap_only(self) -> None:
        network = build_network(TINY, TaskSet.parse("H"))
        self.assertEqual(set(network.predict(images(1))), {"H"})

    def test_batch_independence(self) -> None:
        batch = images(3, seed=5)
        together = self.network.predict(batch)
        for i in range(3):
            alone = self.network.predict(batch[i:i + 1])
            for task, value in alone.items():
                np.testing.assert_allclose(value[0], together[task][i], atol=1e-12)

    def test_wrong_input_shape(self) -> None:
        with self.assertRaises(ShapeMismatch):
            self.network.forward(np.zeros((1, 1, 8, 8)))

    def test_shared_parameter_is_last_trunk_layer(self) -> None:
        self.assertEqual(self.network.shared_parameter.name, "trunk.conv1.w")


class TestAdam(unittest.TestCase):
    def test_zero_gradient_leaves_values(self) -> None:
        params = {"x": parameter(np.array([1.0, -2.0]), "x")}
        sgd_adam_step(params, {"x": np.zeros(2)}, AdamState(), lr=0.1)
        np.testing.assert_array_equal(params["x"].data, [1.0, -2.0])

    def test_first_step_has_size_lr(self) -> None:
        params = {"x": parameter(np.array([1.0, -2.0, 0.5]), "x")}
        sgd_adam_step(params, {"x": np.array([3.0, -0.5, 1.0])}, AdamState(), lr=0.01)
        np.testing.assert_allclose(params["x"].data, [0.99, -1.99, 0.49], rtol=1e-6)

    def test_quadratic_bowl(self) -> None:
        params = {"x": parameter(np.array([3.0, -2.0]), "x")}
        state = AdamState()
        for _ in range(2000):
            sgd_adam_step(params, {"x": 2.0 * params["x"].data}, state, lr=0.05)
        self.assertLess(float(np.max(np.abs(params["x"].data))), 0.05)
        self.assertEqual(state.step, 2000)

    def test_non_finite_gradient(self) -> None:
        params = {"x": parameter(np.ones(2), "x")}
        with self.assertRaises(TrainingDiverged):
            sgd_adam_step(params, {"x": np.array([1.0, np.nan])}, AdamState(), lr=0.1)
        np.testing.assert_array_equal(params["x"].data, [1.0, 1.0])

    def test_gradient_shape(self) -> None:
        params = {"x": parameter(np.ones(2), "x")}
        with self.assertRaises(ShapeMismatch):
            sgd_adam_step(params, {"x": np.ones(3)}, AdamState(), lr=0.1)


class TestCheckpoint(unittest.TestCase):
    def setUp(self) -> None:
        self.checkpoint = Checkpoint(build_network(TINY, TaskSet.parse("PHS")), 12, {"note": "x"})

    def test_round_trip(self) -> None:
        back = decode_checkpoint(encode_checkpoint(self.checkpoint))
        self.assertEqual(back.step, 12)
        self.assertEqual(back.extra, {"note": "x"})
        self.assertEqual(str(back.network.tasks), "PHS")
        self.assertEqual(back.network.config, TINY)
        for name, tensor in self.checkpoint.network.parameters.items():
            np.testing.assert_array_equal(back.network.parameters[name].data, tensor.data)

    def test_corrupt_data(self) -> None:
        data = encode_checkpoint(self.checkpoint)
        broken = {
            "magic": b"XXXX" + data[4:],
            "version": data[:4] + b"\x07" + data[5:],
            "truncated": data[:-8],
            "trailing": data + b"\x00" * 8,
            "preamble": data[:6],
        }
        for label, blob in broken.items():
            with self.subTest(label=label), self.assertRaises(CorruptCheckpoint):
                decode_checkpoint(blob)

    def test_missing_file(self) -> None:
        with self.assertRaises(CorruptCheckpoint):
            load_checkpoint(Path("/nonexistent/model.mtlc"))


def test_save_and_load(tmp_path) -> None:
    checkpoint = Checkpoint(build_network(TINY, TaskSet.parse("P")), 1)
    save_checkpoint(tmp_path / "run" / "model.mtlc", checkpoint)
    back = load_checkpoint(tmp_path / "run" / "model.mtlc")
    x = images(2)
    np.testing.assert_array_equal(back.network.predict(x)["P"], checkpoint.network.predict(x)["P"])


class TestStrip(unittest.TestCase):
    def test_keeps_trunk_and_predictions(self) -> None:
        full = Checkpoint(build_network(TINY, TaskSet.parse("PHBS")), 5)
        pruned = strip_auxiliary_heads(full, TaskSet.parse("P"))
        counts = pruned.network.parameter_counts()
        self.assertEqual(set(counts), {"trunk", "P", "total"})
        self.assertEqual(counts["trunk"], full.network.parameter_counts()["trunk"])
        self.assertEqual(pruned.extra["pruned_from"], "PHBS")
        x = images(2)
        np.testing.assert_array_equal(pruned.network.predict(x)["P"], full.network.predict(x)["P"])

    def test_cannot_keep_absent_head(self) -> None:
        with self.assertRaises(InvalidRequest):
            strip_auxiliary_heads(Checkpoint(build_network(TINY, TaskSet.parse("P"))), TaskSet.parse("PH"))


@pytest.mark.parametrize("tasks", ["P", "H", "PB", "HS", "PHBS"])
def test_repr_names_tasks(tasks: str) -> None:
    assert f"tasks={TaskSet.parse(tasks)}" in repr(build_network(TINY, TaskSet.parse(tasks)))
