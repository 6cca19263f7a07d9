"""PnP solver and indirect pose tests."""
import unittest

import numpy as np
import pytest

from mtlpose import heatmap
from mtlpose.errors import DegenerateGeometry, InsufficientPoints, InvalidInput
from mtlpose.geometry import (
    CameraModel, Pose, axis_angle_quat, project, quat_to_matrix, rotation_error, translation_error,
)
from mtlpose.pnp import Correspondence, dlt, indirect_pose, left_jacobian, solve_pnp
from mtlpose.scene import build_target_model

CAMERA = CameraModel(512, 512, 800.0, 256.0, 256.0)
MODEL = build_target_model()


def random_pose(rng: np.random.Generator) -> Pose:
    return Pose(rng.standard_normal(4), np.array([*rng.uniform(-0.5, 0.5, 2), rng.uniform(2.0, 25.0)]))


def observe(pose: Pose, noise_px: float = 0.0, rng: np.random.Generator | None = None) -> list[Correspondence]:
    uv = project(CAMERA, pose, MODEL.keypoints)
    if noise_px:
        assert rng is not None
        uv = uv + rng.normal(0.0, noise_px, uv.shape)
    return [Correspondence(tuple(p), tuple(q)) for p, q in zip(MODEL.keypoints, uv)]


class TestSolvePnP(unittest.TestCase):
    def test_noiseless_recovery(self) -> None:
        rng = np.random.default_rng(12)
        for _ in range(100):
            pose = random_pose(rng)
            result = solve_pnp(observe(pose), CAMERA)
            self.assertLess(rotation_error(result.pose.q, pose.q), 1e-6)
            self.assertLess(translation_error(result.pose.t, pose.t) / np.linalg.norm(pose.t), 1e-6)
            self.assertLess(result.rms_px, 1e-6)
            self.assertLessEqual(result.final_cost, result.initial_cost)

    def test_too_few_points(self) -> None:
        corrs = observe(Pose.identity((0, 0, 6)))[:5]
        with self.assertRaises(InsufficientPoints):
            solve_pnp(corrs, CAMERA)

    def test_zero_weights_do_not_count(self) -> None:
        corrs = observe(Pose.identity((0, 0, 6)))
        corrs = [Correspondence(c.p3, c.p2, 0.0 if i >= 5 else 1.0) for i, c in enumerate(corrs)]
        with self.assertRaises(InsufficientPoints):
            solve_pnp(corrs, CAMERA)

    def test_coplanar_points(self) -> None:
        rng = np.random.default_rng(2)
        points = np.column_stack([rng.uniform(-1, 1, (8, 2)), np.zeros(8)])
        pose = Pose.identity((0, 0, 6))
        uv = project(CAMERA, pose, points)
        corrs = [Correspondence(tuple(p), tuple(q)) for p, q in zip(points, uv)]
        with self.assertRaises(DegenerateGeometry):
            solve_pnp(corrs, CAMERA)

    def test_non_finite_input(self) -> None:
        corrs = observe(Pose.identity((0, 0, 6)))
        corrs[0] = Correspondence(corrs[0].p3, (float("nan"), 0.0))
        with self.assertRaises(InvalidInput):
            solve_pnp(corrs, CAMERA)

    def test_weight_scale_invariance(self) -> None:
        rng = np.random.default_rng(4)
        pose = random_pose(rng)
        noisy = observe(pose, 0.5, rng)
        weights = rng.uniform(0.3, 1.0, len(noisy))
        a = solve_pnp([Correspondence(c.p3, c.p2, w) for c, w in zip(noisy, weights)], CAMERA)
        b = solve_pnp([Correspondence(c.p3, c.p2, 10.0 * w) for c, w in zip(noisy, weights)], CAMERA)
        self.assertLess(rotation_error(a.pose.q, b.pose.q), 1e-7)
        np.testing.assert_allclose(a.pose.t, b.pose.t, atol=1e-7)


class TestLinearStages(unittest.TestCase):
    def test_dlt_is_exact_without_noise(self) -> None:
        pose = Pose(axis_angle_quat((1, 2, 3), 0.8), np.array([0.2, -0.3, 9.0]))
        uv = project(CAMERA, pose, MODEL.keypoints)
        R, t = dlt(MODEL.keypoints, uv, np.ones(len(uv)), CAMERA)
        np.testing.assert_allclose(R, quat_to_matrix(pose.q), atol=1e-8)
        np.testing.assert_allclose(t, pose.t, atol=1e-7)

    def test_left_jacobian_fixes_axis(self) -> None:
        for omega in (np.array([0.3, -0.2, 0.5]), np.array([1e-10, 0.0, 0.0]), np.array([0.0, 2.5, 0.0])):
            np.testing.assert_allclose(left_jacobian(omega) @ omega, omega, atol=1e-12)
        np.testing.assert_allclose(left_jacobian(np.zeros(3)), np.eye(3))


@pytest.mark.slow
def test_noise_robustness() -> None:
    rng = np.random.default_rng(99)
    errors = []
    for _ in range(300):
        pose = random_pose(rng)
        result = solve_pnp(observe(pose, 0.5, rng), CAMERA)
        errors.append(rotation_error(result.pose.q, pose.q))
    assert np.median(errors) < 0.05


class TestIndirectPose(unittest.TestCase):
    def setUp(self) -> None:
        self.camera = CameraModel.from_fov(128, 128, 35.0)
        self.pose = Pose(axis_angle_quat((1, 1, 0), 0.4), np.array([0.1, -0.1, 4.0]))
        uv = project(self.camera, self.pose, MODEL.keypoints)
        self.stack = heatmap.encode(uv, 128, 128, 1.5)

    def test_ground_truth_heatmaps(self) -> None:
        estimate = indirect_pose(self.stack, MODEL, self.camera)
        self.assertLess(rotation_error(estimate.q, self.pose.q), 1e-3)
        self.assertLess(translation_error(estimate.t, self.pose.t), 1e-2)

    def test_zero_heatmaps(self) -> None:
        with self.assertRaises(InsufficientPoints):
            indirect_pose(np.zeros((18, 128, 128)), MODEL, self.camera)

    def test_exactly_six_channels(self) -> None:
        maps = self.stack.maps.copy()
        maps[6:] = 0.0
        estimate = indirect_pose(maps, MODEL, self.camera)
        self.assertLess(rotation_error(estimate.q, self.pose.q), 1e-3)

    def test_gate_discards_weak_channels(self) -> None:
        maps = self.stack.maps.copy()
        maps[5:] *= 0.1
        with self.assertRaises(InsufficientPoints):
            indirect_pose(maps, MODEL, self.camera, tau=0.2)
