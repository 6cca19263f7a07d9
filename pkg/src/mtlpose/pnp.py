"""Perspective-n-point: DLT initialization and Levenberg-Marquardt refinement."""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
import logging
import math

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import least_squares

from .errors import DegenerateGeometry, InsufficientPoints, InvalidInput, SolverFailure
from .geometry import CameraModel, Pose, matrix_to_quat, rotvec_to_matrix, skew
from . import heatmap
from .scene import TargetModel

logger = logging.getLogger("PnP")

MIN_POINTS = 6
#: Smallest/largest covariance eigenvalue ratio below which the points are treated as planar.
PLANARITY_RATIO = 1e-10
MAX_ITERATIONS = 100
STEP_TOLERANCE = 1e-10
COST_TOLERANCE = 1e-12
GRADIENT_TOLERANCE = 1e-15

Array = NDArray[np.float64]


@dataclass(frozen=True)
class Correspondence:
    p3: tuple[float, float, float]
    p2: tuple[float, float]
    weight: float = 1.0


@dataclass(frozen=True, eq=False)
class PnPResult:
    pose: Pose
    #: Unweighted RMS reprojection error, pixels.
    rms_px: float
    initial_cost: float
    final_cost: float
    iterations: int


def _hartley(points: Array) -> Array:
    """Similarity moving the centroid to the origin with RMS distance sqrt(dim)."""
    dim = points.shape[1]
    centroid = points.mean(axis=0)
    rms = math.sqrt(float(np.mean(np.sum((points - centroid) ** 2, axis=1))))
    if rms == 0.0:
        raise DegenerateGeometry("all points coincide")
    scale = math.sqrt(dim) / rms
    transform = np.eye(dim + 1)
    transform[:dim, :dim] *= scale
    transform[:dim, dim] = -scale * centroid
    return transform


def _homogeneous(points: Array) -> Array:
    return np.hstack([points, np.ones((len(points), 1))])


def dlt(object_points: Array, image_points: Array, weights: Array, camera: CameraModel) -> tuple[Array, Array]:
    """Linear pose estimate: the normalized projection matrix, projected onto a rotation.

    Rows of the linear system are scaled by ``sqrt(weight)``.
    """
    rays = (np.linalg.inv(camera.K) @ _homogeneous(image_points).T).T[:, :2]
    t2, t3 = _hartley(rays), _hartley(object_points)
    x = (t2 @ _homogeneous(rays).T).T
    X = (t3 @ _homogeneous(object_points).T).T
    n = len(X)
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = X
    A[0::2, 8:12] = -x[:, [0]] * X
    A[1::2, 4:8] = X
    A[1::2, 8:12] = -x[:, [1]] * X
    A *= np.repeat(np.sqrt(weights), 2)[:, None]
    _, _, vt = np.linalg.svd(A)
    P = np.linalg.inv(t2) @ vt[-1].reshape(3, 4) @ t3
    M = P[:, :3]
    if np.linalg.det(M) < 0:
        P = -P
        M = -M
    u, s, vt_m = np.linalg.svd(M)
    R = u @ vt_m
    t = P[:, 3] / s.mean()
    return R, t


def left_jacobian(omega: Array) -> Array:
    """Left Jacobian of SO(3) at rotation vector ``omega``."""
    theta = float(np.linalg.norm(omega))
    W = skew(omega)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * W
    return (
        np.eye(3)
        + (1.0 - math.cos(theta)) / theta ** 2 * W
        + (theta - math.sin(theta)) / theta ** 3 * (W @ W)
    )


class Refinement:
    """Weighted reprojection residuals of ``exp(omega) R0`` and ``t``, with their Jacobian."""
    def __init__(self, R0: Array, object_points: Array, image_points: Array, weights: Array, camera: CameraModel) -> None:
        self.R0 = R0
        self.X = object_points
        self.uv = image_points
        self.sqrt_w = np.repeat(np.sqrt(weights), 2)
        self.camera = camera

    def pose(self, x: Array) -> tuple[Array, Array]:
        return rotvec_to_matrix(x[:3]) @ self.R0, x[3:]

    def project(self, x: Array) -> tuple[Array, Array]:
        R, t = self.pose(x)
        p = self.X @ R.T + t
        uv = self.camera.f_px * p[:, :2] / p[:, 2:3] + np.array([self.camera.cx, self.camera.cy])
        return uv, p

    def residuals(self, x: Array) -> Array:
        uv, _ = self.project(x)
        return self.sqrt_w * (uv - self.uv).ravel()

    def jacobian(self, x: Array) -> Array:
        R, _ = self.pose(x)
        _, p = self.project(x)
        f = self.camera.f_px
        z = p[:, 2]
        d_uv_d_p = np.zeros((len(p), 2, 3))
        d_uv_d_p[:, 0, 0] = f / z
        d_uv_d_p[:, 1, 1] = f / z
        d_uv_d_p[:, 0, 2] = -f * p[:, 0] / z ** 2
        d_uv_d_p[:, 1, 2] = -f * p[:, 1] / z ** 2
        J_l = left_jacobian(x[:3])
        rotated = self.X @ R.T
        d_p_d_omega = np.stack([-skew(r) @ J_l for r in rotated])
        J = np.concatenate([d_uv_d_p @ d_p_d_omega, d_uv_d_p], axis=2)
        return self.sqrt_w[:, None] * J.reshape(-1, 6)

    def cost(self, x: Array) -> float:
        r = self.residuals(x)
        return float(0.5 * r @ r)


def _as_arrays(corrs: Sequence[Correspondence]) -> tuple[Array, Array, Array]:
    object_points = np.array([c.p3 for c in corrs], dtype=np.float64).reshape(-1, 3)
    image_points = np.array([c.p2 for c in corrs], dtype=np.float64).reshape(-1, 2)
    weights = np.array([c.weight for c in corrs], dtype=np.float64)
    if not (np.all(np.isfinite(object_points)) and np.all(np.isfinite(image_points)) and np.all(np.isfinite(weights))):
        raise InvalidInput("correspondences must be finite")
    return object_points, image_points, weights


def solve_pnp(corrs: Sequence[Correspondence], camera: CameraModel) -> PnPResult:
    """Pose from 2D-3D correspondences, minimizing confidence-weighted reprojection error."""
    object_points, image_points, weights = _as_arrays(corrs)
    keep = weights > 0
    if np.count_nonzero(keep) < MIN_POINTS:
        raise InsufficientPoints(f"{np.count_nonzero(keep)} weighted correspondences, {MIN_POINTS} required")
    object_points, image_points, weights = object_points[keep], image_points[keep], weights[keep]
    eigenvalues = np.linalg.eigvalsh(np.cov(object_points.T))
    if eigenvalues[-1] <= 0 or eigenvalues[0] / eigenvalues[-1] < PLANARITY_RATIO:
        raise DegenerateGeometry(f"3D points are coplanar (covariance eigenvalues {eigenvalues.tolist()})")

    R0, t0 = dlt(object_points, image_points, weights, camera)
    problem = Refinement(R0, object_points, image_points, weights, camera)
    x0 = np.concatenate([np.zeros(3), t0])
    initial_cost = problem.cost(x0)
    if not math.isfinite(initial_cost):
        raise SolverFailure(f"non-finite initial cost {initial_cost!r}")

    result = least_squares(
        problem.residuals, x0, jac=problem.jacobian, method="lm", x_scale="jac",
        ftol=COST_TOLERANCE, xtol=STEP_TOLERANCE, gtol=GRADIENT_TOLERANCE, max_nfev=MAX_ITERATIONS,
    )
    if not np.all(np.isfinite(result.x)) or not np.all(np.isfinite(result.fun)):
        raise SolverFailure(f"refinement diverged: {result.message}")
    x = result.x
    final_cost = problem.cost(x)
    if not final_cost <= initial_cost:
        logger.debug("refinement raised the cost %g -> %g; keeping the linear estimate", initial_cost, final_cost)
        x, final_cost = x0, initial_cost

    R, t = problem.pose(x)
    uv, p = problem.project(x)
    if np.any(p[:, 2] <= 0):
        raise SolverFailure(f"solution places the target behind the camera (t={t.tolist()})")
    rms = math.sqrt(float(np.mean(np.sum((uv - image_points) ** 2, axis=1))))
    logger.debug("PnP: cost %.3g -> %.3g in %d evaluations, rms %.3g px", initial_cost, final_cost, result.nfev, rms)
    return PnPResult(Pose(matrix_to_quat(R), t), rms, initial_cost, final_cost, int(result.nfev))


def correspondences(model: TargetModel, decoded: heatmap.DecodedKeypoints) -> list[Correspondence]:
    """One correspondence per valid decoded keypoint, weighted by its confidence."""
    found = []
    for k in np.flatnonzero(decoded.valid):
        x, y, z = (float(c) for c in model.keypoints[k])
        u, v = (float(c) for c in decoded.uv[k])
        found.append(Correspondence((x, y, z), (u, v), float(decoded.confidence[k])))
    return found


def indirect_pose(
    stack: heatmap.HeatmapStack | ArrayLike,
    model: TargetModel,
    camera: CameraModel,
    tau: float = heatmap.TAU,
) -> Pose:
    """Decode predicted heatmaps, gate by ``tau`` and solve PnP."""
    maps = stack if isinstance(stack, heatmap.HeatmapStack) else np.asarray(stack, dtype=np.float64)
    decoded = heatmap.decode(maps, tau)
    corrs = correspondences(model, decoded)
    if len(corrs) < MIN_POINTS:
        raise InsufficientPoints(f"{len(corrs)} keypoints above confidence {tau}, {MIN_POINTS} required")
    return solve_pnp(corrs, camera).pose
