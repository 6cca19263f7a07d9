"""Rotation and translation algebra, pinhole projection, and pose metrics.

Conventions used repo-wide:

-   Quaternions are scalar-first ``(w, x, y, z)`` with the Hamilton product.
-   A :class:`Pose` maps body-frame points into the camera frame:
    ``p_cam = R(q) @ p_body + t``.
-   Pixel ``(row, col)`` has its center at ``(u, v) = (col, row)``.
"""
from __future__ import annotations

from dataclasses import dataclass
import math
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import BehindCamera, InvalidBox, InvalidInput, DegenerateQuaternion

Vector = NDArray[np.float64]

#: Points closer than this to the camera plane cannot be projected.
MIN_DEPTH = 1e-6


def _frozen(values: ArrayLike, shape: tuple[int, ...], name: str) -> Vector:
    array = np.array(values, dtype=np.float64)
    if array.shape != shape:
        raise InvalidInput(f"{name} must have shape {shape}, got {array.shape}")
    if not np.all(np.isfinite(array)):
        raise InvalidInput(f"{name} must be finite, got {array!r}")
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Pose:
    """A unit quaternion and a translation (m) in the camera frame."""
    #: Camera-from-body rotation, scalar-first, normalized on construction.
    q: Vector
    #: Translation of the body origin in the camera frame, meters.
    t: Vector

    def __post_init__(self) -> None:
        q = _frozen(self.q, (4,), "q")
        norm = float(np.linalg.norm(q))
        if norm < 1e-8:
            raise DegenerateQuaternion(f"quaternion norm {norm!r} too small to normalize")
        q = q / norm
        q.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", _frozen(self.t, (3,), "t"))

    @classmethod
    def identity(cls, t: ArrayLike = (0.0, 0.0, 1.0)) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.asarray(t, dtype=np.float64))

    @property
    def R(self) -> NDArray[np.float64]:
        return quat_to_matrix(self.q)

    def as_dict(self) -> dict[str, list[float]]:
        return {"q": [float(v) for v in self.q], "t": [float(v) for v in self.t]}

    @classmethod
    def from_dict(cls, document: dict[str, Any]) -> "Pose":
        return cls(np.array(document["q"], dtype=np.float64), np.array(document["t"], dtype=np.float64))

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(q={self.q.tolist()!r}, t={self.t.tolist()!r})"


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics and image geometry."""
    width_px: int
    height_px: int
    f_px: float
    cx: float
    cy: float
    #: Metadata only; the projection uses ``f_px``.
    fov_deg: float | None = None
    focal_mm: float | None = None
    pixel_pitch_um: float | None = None

    def __post_init__(self) -> None:
        if self.width_px <= 0 or self.height_px <= 0:
            raise InvalidInput(f"image size must be positive, got {self.width_px}x{self.height_px}")
        if not (math.isfinite(self.f_px) and self.f_px > 0):
            raise InvalidInput(f"f_px must be positive, got {self.f_px!r}")
        if not (0 <= self.cx < self.width_px and 0 <= self.cy < self.height_px):
            raise InvalidInput(f"principal point ({self.cx}, {self.cy}) outside the image")

    @classmethod
    def from_fov(
        cls,
        width_px: int,
        height_px: int,
        fov_deg: float,
        focal_mm: float | None = None,
        pixel_pitch_um: float | None = None,
    ) -> "CameraModel":
        """Focal length from the horizontal field of view; principal point at exactly W/2, H/2."""
        f_px = width_px / (2.0 * math.tan(math.radians(fov_deg) / 2.0))
        return cls(
            width_px, height_px, f_px, width_px / 2.0, height_px / 2.0,
            fov_deg=fov_deg, focal_mm=focal_mm, pixel_pitch_um=pixel_pitch_um,
        )

    @classmethod
    def full_scale(cls) -> "CameraModel":
        return cls.from_fov(1024, 1024, 35.0, focal_mm=39.47, pixel_pitch_um=5.86)

    @classmethod
    def desk(cls, size: int = 64) -> "CameraModel":
        """The 35 degree camera scaled to a ``size`` x ``size`` image."""
        return cls.from_fov(size, size, 35.0, focal_mm=39.47, pixel_pitch_um=5.86 * 1024 / size)

    @property
    def K(self) -> NDArray[np.float64]:
        return np.array([
            [self.f_px, 0.0, self.cx],
            [0.0, self.f_px, self.cy],
            [0.0, 0.0, 1.0],
        ])

    def in_frame(self, uv: ArrayLike) -> NDArray[np.bool_]:
        """True where a pixel coordinate falls on some pixel of the image."""
        points = np.atleast_2d(np.asarray(uv, dtype=np.float64))
        u, v = points[:, 0], points[:, 1]
        return (u >= -0.5) & (u < self.width_px - 0.5) & (v >= -0.5) & (v < self.height_px - 0.5)

    def as_dict(self) -> dict[str, Any]:
        return {
            "width_px": self.width_px, "height_px": self.height_px,
            "f_px": self.f_px, "cx": self.cx, "cy": self.cy,
            "fov_deg": self.fov_deg, "focal_mm": self.focal_mm, "pixel_pitch_um": self.pixel_pitch_um,
        }

    @classmethod
    def from_dict(cls, document: dict[str, Any]) -> "CameraModel":
        return cls(
            int(document["width_px"]), int(document["height_px"]),
            float(document["f_px"]), float(document["cx"]), float(document["cy"]),
            fov_deg=document.get("fov_deg"), focal_mm=document.get("focal_mm"),
            pixel_pitch_um=document.get("pixel_pitch_um"),
        )


@dataclass(frozen=True)
class BBox:
    """An axis-aligned box in center-size form, pixels."""
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if not (self.w > 0 and self.h > 0):
            raise InvalidBox(f"box width and height must be positive, got w={self.w!r}, h={self.h!r}")

    @classmethod
    def from_extent(cls, col_min: int, col_max: int, row_min: int, row_max: int) -> "BBox":
        """The box covering whole pixels ``col_min..col_max`` by ``row_min..row_max``."""
        return cls(
            (col_min + col_max) / 2.0, (row_min + row_max) / 2.0,
            float(col_max - col_min + 1), float(row_max - row_min + 1),
        )

    @property
    def extent(self) -> tuple[int, int, int, int]:
        """Inverse of :meth:`from_extent`: ``(col_min, col_max, row_min, row_max)``."""
        half_w, half_h = (self.w - 1) / 2.0, (self.h - 1) / 2.0
        return (
            int(round(self.cx - half_w)), int(round(self.cx + half_w)),
            int(round(self.cy - half_h)), int(round(self.cy + half_h)),
        )

    def as_array(self) -> NDArray[np.float64]:
        return np.array([self.cx, self.cy, self.w, self.h])

    @property
    def area(self) -> float:
        return self.w * self.h


# Quaternion algebra


def quat_multiply(a: ArrayLike, b: ArrayLike) -> NDArray[np.float64]:
    """Hamilton product ``a * b``."""
    aw, ax, ay, az = np.asarray(a, dtype=np.float64)
    bw, bx, by, bz = np.asarray(b, dtype=np.float64)
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: ArrayLike) -> NDArray[np.float64]:
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array([w, -x, -y, -z])


def axis_angle_quat(axis: ArrayLike, angle: float) -> NDArray[np.float64]:
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    return np.concatenate(([math.cos(angle / 2.0)], math.sin(angle / 2.0) * a))


def quat_to_matrix(q: ArrayLike) -> NDArray[np.float64]:
    """The rotation matrix of a unit quaternion."""
    w, x, y, z = np.asarray(q, dtype=np.float64)
    norm = math.sqrt(w * w + x * x + y * y + z * z)
    if abs(norm - 1.0) > 1e-6:
        raise InvalidInput(f"quaternion is not unit length (norm {norm!r})")
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: ArrayLike) -> NDArray[np.float64]:
    """Shepperd's method; the result has a non-negative scalar part."""
    m = np.asarray(R, dtype=np.float64)
    if m.shape != (3, 3):
        raise InvalidInput(f"rotation matrix must be 3x3, got {m.shape}")
    if np.max(np.abs(m.T @ m - np.eye(3))) > 1e-6 or np.linalg.det(m) < 0:
        raise InvalidInput("matrix is not a proper rotation")
    trace = m[0, 0] + m[1, 1] + m[2, 2]
    candidates = (trace, m[0, 0], m[1, 1], m[2, 2])
    match int(np.argmax(candidates)):
        case 0:
            s = 2.0 * math.sqrt(1.0 + trace)
            q = np.array([s / 4, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
        case 1:
            s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = np.array([(m[2, 1] - m[1, 2]) / s, s / 4, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
        case 2:
            s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, s / 4, (m[1, 2] + m[2, 1]) / s])
        case _:
            s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, s / 4])
    q = q / np.linalg.norm(q)
    return -q if q[0] < 0 else q


def skew(v: ArrayLike) -> NDArray[np.float64]:
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotvec_to_matrix(omega: ArrayLike) -> NDArray[np.float64]:
    """Rodrigues' formula for a rotation vector (radians)."""
    w = np.asarray(omega, dtype=np.float64)
    angle = float(np.linalg.norm(w))
    if angle < 1e-12:
        return np.eye(3) + skew(w)
    k = skew(w / angle)
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)


# Projection


def to_camera(pose: Pose, points: ArrayLike) -> NDArray[np.float64]:
    """Body-frame points (N, 3) into the camera frame."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return p @ pose.R.T + pose.t


def project(camera: CameraModel, pose: Pose, points: ArrayLike) -> NDArray[np.float64]:
    """Pixel coordinates (N, 2) of body-frame points; order is preserved."""
    p_cam = to_camera(pose, points)
    for index, depth in enumerate(p_cam[:, 2]):
        if not depth > MIN_DEPTH:
            raise BehindCamera(index, float(depth))
    z = p_cam[:, 2]
    u = camera.f_px * p_cam[:, 0] / z + camera.cx
    v = camera.f_px * p_cam[:, 1] / z + camera.cy
    return np.stack([u, v], axis=1)


# Metrics


def _finite(vector: ArrayLike, name: str) -> NDArray[np.float64]:
    array = np.asarray(vector, dtype=np.float64)
    if not np.all(np.isfinite(array)):
        raise InvalidInput(f"{name} must be finite, got {array!r}")
    return array


def translation_error(t_hat: ArrayLike, t: ArrayLike) -> float:
    """Euclidean distance between two translations, meters."""
    return float(np.linalg.norm(_finite(t_hat, "t_hat") - _finite(t, "t")))


def rotation_error(q_hat: ArrayLike, q: ArrayLike) -> float:
    """Geodesic angle between two attitudes, radians in [0, pi].

    Equal to ``arccos((trace(R_hat R^T) - 1) / 2)``; the quaternion form avoids
    the arccos domain excursions of the trace near 0 and pi.
    """
    dot = abs(float(np.dot(_finite(q_hat, "q_hat"), _finite(q, "q"))))
    return 2.0 * math.acos(min(1.0, dot))


def rotation_error_trace(R_hat: ArrayLike, R: ArrayLike) -> float:
    """The literal trace formula, argument clamped to [-1, 1]."""
    cosine = (np.trace(np.asarray(R_hat) @ np.asarray(R).T) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, float(cosine))))


def speed_score(pose_hat: Pose, pose_gt: Pose) -> float:
    """Rotation error plus range-normalized translation error."""
    range_gt = float(np.linalg.norm(pose_gt.t))
    if range_gt == 0.0:
        raise InvalidInput("ground-truth translation has zero norm")
    return rotation_error(pose_hat.q, pose_gt.q) + translation_error(pose_hat.t, pose_gt.t) / range_gt
