"""Synthetic scenes: the stand-in target, pose sampling, and a z-buffer rasterizer."""
from __future__ import annotations

from dataclasses import dataclass
import itertools
import logging
import math
from typing import Any

import numpy as np
from numpy.typing import NDArray

from .errors import DegenerateSample, GenerationError, InvalidInput
from .geometry import BBox, CameraModel, MIN_DEPTH, Pose, to_camera
from . import heatmap

logger = logging.getLogger("Scene")

#: Named model version, recorded in every dataset manifest.
MODEL_VERSION = "desk-bus-v1"
N_KEYPOINTS = 18

#: Poses putting any vertex nearer than this to the camera are rejected.
NEAR_PLANE = 0.01
#: Triangles with smaller screen-space doubled area are edge-on.
MIN_SCREEN_AREA = 1e-12

# Scene appearance.
AMBIENT = 0.1
LIGHT_RANGE = (0.4, 1.0)
BACKGROUND_MAX = 0.08
N_STARS = 20
STAR_RANGE = (0.6, 1.0)


@dataclass(frozen=True, eq=False)
class TargetModel:
    """Triangle mesh and labeled keypoints, meters in the body frame."""
    vertices: NDArray[np.float64]
    triangles: NDArray[np.int64]
    keypoints: NDArray[np.float64]
    keypoint_names: tuple[str, ...]
    version: str = MODEL_VERSION

    def __post_init__(self) -> None:
        if self.keypoints.shape != (N_KEYPOINTS, 3) or len(self.keypoint_names) != N_KEYPOINTS:
            raise InvalidInput(f"target model needs exactly {N_KEYPOINTS} keypoints, got {len(self.keypoints)}")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise InvalidInput(f"triangles must be (T, 3), got {self.triangles.shape}")
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise InvalidInput("triangle index out of range")
        radius = float(np.max(np.linalg.norm(self.vertices, axis=1)))
        if radius > 1.0:
            raise InvalidInput(f"model exceeds the 1 m bounding sphere (radius {radius:.3f} m)")
        for array in (self.vertices, self.triangles, self.keypoints):
            array.setflags(write=False)

    def as_dict(self) -> dict[str, Any]:
        return {
            "version": self.version,
            "keypoint_names": list(self.keypoint_names),
            "keypoints": self.keypoints.tolist(),
        }


def build_target_model() -> TargetModel:
    """The desk stand-in: a cuboid bus, two solar panels, two antennas.

    Keypoints are the 8 bus corners, the 8 panel corners and the 2 antenna tips,
    all of which are mesh vertices.
    """
    hx, hy, hz = 0.4, 0.375, 0.16
    vertices: list[tuple[float, float, float]] = []
    triangles: list[tuple[int, int, int]] = []
    names: list[str] = []
    keypoint_index: list[int] = []

    def vertex(p: tuple[float, float, float], name: str | None = None) -> int:
        vertices.append(p)
        if name:
            names.append(name)
            keypoint_index.append(len(vertices) - 1)
        return len(vertices) - 1

    # Bus corners; sign letters are m(inus)/p(lus) along x, y, z.
    corner: dict[tuple[int, int, int], int] = {}
    for sx, sy, sz in itertools.product((-1, 1), repeat=3):
        label = "".join("m" if s < 0 else "p" for s in (sx, sy, sz))
        corner[sx, sy, sz] = vertex((sx * hx, sy * hy, sz * hz), f"bus_{label}")
    for axis in range(3):
        for side in (-1, 1):
            face = [c for c in corner if c[axis] == side]
            # Order the face's four corners around its perimeter.
            others = [a for a in range(3) if a != axis]
            ring = sorted(face, key=lambda k: math.atan2(k[others[1]], k[others[0]]))
            i0, i1, i2, i3 = (corner[k] for k in ring)
            triangles.extend([(i0, i1, i2), (i0, i2, i3)])

    # Solar panels in the z=0 plane, hinged on the +x and -x bus faces.
    for side, label in ((1, "p"), (-1, "m")):
        inner, outer, half = side * hx, side * 0.92, 0.3
        a = vertex((inner, -half, 0.0), f"panel_{label}_inner_m")
        b = vertex((outer, -half, 0.0), f"panel_{label}_outer_m")
        c = vertex((outer, half, 0.0), f"panel_{label}_outer_p")
        d = vertex((inner, half, 0.0), f"panel_{label}_inner_p")
        triangles.extend([(a, b, c), (a, c, d)])

    # Antennas: two crossed blades from the -z face to a tip.
    for tip, label in (((0.25, 0.2, -0.5), "antenna_p"), ((-0.25, -0.2, -0.5), "antenna_m")):
        x, y, _ = tip
        t = vertex(tip, label)
        b0 = vertex((x - 0.01, y, -hz))
        b1 = vertex((x + 0.01, y, -hz))
        b2 = vertex((x, y - 0.01, -hz))
        b3 = vertex((x, y + 0.01, -hz))
        triangles.extend([(b0, b1, t), (b2, b3, t)])

    vertex_array = np.array(vertices, dtype=np.float64)
    return TargetModel(
        vertices=vertex_array,
        triangles=np.array(triangles, dtype=np.int64),
        keypoints=vertex_array[keypoint_index].copy(),
        keypoint_names=tuple(names),
    )


def sample_pose(
    rng: np.random.Generator,
    d_min: float,
    d_max: float,
    camera: CameraModel,
    central_fraction: float = 0.8,
    max_draws: int = 10_000,
) -> Pose:
    """A random pose whose target center projects inside the central part of the image.

    Range is uniform in ``[d_min, d_max]``; attitude is uniform on SO(3)
    (a normalized 4-D Gaussian). Line-of-sight directions are drawn uniformly
    over the spherical cap enclosing the central region and rejected outside it.
    """
    if not 0 < d_min < d_max:
        raise InvalidInput(f"distance range must satisfy 0 < d_min < d_max, got [{d_min}, {d_max}]")
    margin = (1.0 - central_fraction) / 2.0
    u_lo, u_hi = margin * camera.width_px, (1.0 - margin) * camera.width_px
    v_lo, v_hi = margin * camera.height_px, (1.0 - margin) * camera.height_px
    corners_x = np.array([u_lo, u_hi]) - camera.cx
    corners_y = np.array([v_lo, v_hi]) - camera.cy
    reach = math.hypot(float(np.max(np.abs(corners_x))), float(np.max(np.abs(corners_y)))) / camera.f_px
    cos_max = math.cos(math.atan(reach))

    for _ in range(max_draws):
        cos_theta = rng.uniform(cos_max, 1.0)
        phi = rng.uniform(0.0, 2.0 * math.pi)
        sin_theta = math.sqrt(max(0.0, 1.0 - cos_theta * cos_theta))
        direction = np.array([sin_theta * math.cos(phi), sin_theta * math.sin(phi), cos_theta])
        u = camera.f_px * direction[0] / direction[2] + camera.cx
        v = camera.f_px * direction[1] / direction[2] + camera.cy
        if u_lo <= u <= u_hi and v_lo <= v <= v_hi:
            distance = rng.uniform(d_min, d_max)
            q = rng.standard_normal(4)
            return Pose(q, distance * direction)
    raise GenerationError(f"no visible pose after {max_draws} draws; check camera and distance range")


@dataclass(frozen=True, eq=False)
class SampleRecord:
    """One dataset item."""
    index: int
    image: NDArray[np.float64]
    pose: Pose
    keypoints_px: NDArray[np.float64]
    bbox: BBox
    mask: NDArray[np.bool_]
    visibility: NDArray[np.bool_]

    def heatmaps(self, sigma_px: float) -> heatmap.HeatmapStack:
        height, width = self.image.shape
        return heatmap.encode(self.keypoints_px, height, width, sigma_px)

    def problems(self, camera: CameraModel) -> list[str]:
        """Every violated record invariant, empty when the record is sound."""
        found: list[str] = []
        shape = (camera.height_px, camera.width_px)
        if self.image.shape != shape or self.mask.shape != shape:
            found.append(f"image/mask shape {self.image.shape}/{self.mask.shape} differs from camera {shape}")
            return found
        if self.keypoints_px.shape != (N_KEYPOINTS, 2) or self.visibility.shape != (N_KEYPOINTS,):
            found.append("keypoint arrays must hold 18 entries")
            return found
        if np.any(self.image < 0.0) or np.any(self.image > 1.0):
            found.append("image intensities outside [0, 1]")
        if not self.mask.any():
            found.append("empty mask")
        elif self.bbox.extent != mask_extent(self.mask):
            found.append(f"bbox {self.bbox} is not tight on the mask {mask_extent(self.mask)}")
        if not np.all(camera.in_frame(self.keypoints_px)[self.visibility]):
            found.append("visible keypoint outside the image")
        return found


def mask_extent(mask: NDArray[np.bool_]) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(cols[-1]), int(rows[0]), int(rows[-1])


class Rasterizer:
    """Half-space triangle rasterizer with a perspective-correct z-buffer.

    A pixel is covered when its center lies inside or on the edge of a
    triangle's projection.
    """
    def __init__(self, camera: CameraModel) -> None:
        self.logger = logging.getLogger(self.__class__.__qualname__)
        self.camera = camera

    def screen(self, p_cam: NDArray[np.float64]) -> NDArray[np.float64]:
        z = p_cam[:, 2]
        return np.stack([
            self.camera.f_px * p_cam[:, 0] / z + self.camera.cx,
            self.camera.f_px * p_cam[:, 1] / z + self.camera.cy,
        ], axis=1)

    @staticmethod
    def barycentric(
        tri: NDArray[np.float64], u: NDArray[np.float64], v: NDArray[np.float64]
    ) -> tuple[NDArray[np.float64], NDArray[np.bool_]] | None:
        """Barycentric weights (3, N) of points, and the inside test. None for edge-on triangles."""
        (x0, y0), (x1, y1), (x2, y2) = tri
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < MIN_SCREEN_AREA:
            return None
        e0 = (x2 - x1) * (v - y1) - (y2 - y1) * (u - x1)
        e1 = (x0 - x2) * (v - y2) - (y0 - y2) * (u - x2)
        e2 = (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0)
        weights = np.stack([e0, e1, e2]) / area
        inside = np.all(weights >= 0.0, axis=0)
        return weights, inside

    def rasterize(
        self, p_cam: NDArray[np.float64], triangles: NDArray[np.int64]
    ) -> tuple[NDArray[np.float64], NDArray[np.int64]]:
        """Depth buffer (inf where empty) and front-most triangle index (-1 where empty)."""
        height, width = self.camera.height_px, self.camera.width_px
        depth = np.full((height, width), np.inf)
        owner = np.full((height, width), -1, dtype=np.int64)
        uv = self.screen(p_cam)
        for index, tri in enumerate(triangles):
            screen_tri = uv[tri]
            col_lo = max(0, math.ceil(float(screen_tri[:, 0].min())))
            col_hi = min(width - 1, math.floor(float(screen_tri[:, 0].max())))
            row_lo = max(0, math.ceil(float(screen_tri[:, 1].min())))
            row_hi = min(height - 1, math.floor(float(screen_tri[:, 1].max())))
            if col_lo > col_hi or row_lo > row_hi:
                continue
            rows, cols = np.mgrid[row_lo:row_hi + 1, col_lo:col_hi + 1]
            found = self.barycentric(screen_tri, cols.ravel().astype(np.float64), rows.ravel().astype(np.float64))
            if found is None:
                continue
            weights, inside = found
            if not inside.any():
                continue
            inverse_z = weights[:, inside].T @ (1.0 / p_cam[tri, 2])
            z = 1.0 / inverse_z
            r, c = rows.ravel()[inside], cols.ravel()[inside]
            nearer = z < depth[r, c]
            depth[r[nearer], c[nearer]] = z[nearer]
            owner[r[nearer], c[nearer]] = index
        return depth, owner

    def depth_at(
        self, p_cam: NDArray[np.float64], triangles: NDArray[np.int64], uv: NDArray[np.float64]
    ) -> NDArray[np.float64]:
        """Nearest surface depth along the rays through subpixel points ``uv`` (inf if none)."""
        screen_uv = self.screen(p_cam)
        nearest = np.full(len(uv), np.inf)
        for tri in triangles:
            found = self.barycentric(screen_uv[tri], uv[:, 0], uv[:, 1])
            if found is None:
                continue
            weights, _ = found
            inside = np.all(weights >= -1e-9, axis=0)
            if not inside.any():
                continue
            z = 1.0 / (weights[:, inside].T @ (1.0 / p_cam[tri, 2]))
            nearest[inside] = np.minimum(nearest[inside], z)
        return nearest


def render(
    camera: CameraModel,
    pose: Pose,
    model: TargetModel,
    rng: np.random.Generator,
    index: int = 0,
) -> SampleRecord:
    """Rasterize one sample: shaded silhouette over a noisy star field, plus its annotations.

    Flat Lambertian shading under one directional light. A keypoint is visible
    when it is in frame and no surface lies in front of it along its ray.
    """
    p_cam = to_camera(pose, model.vertices)
    if np.any(p_cam[:, 2] <= NEAR_PLANE):
        raise DegenerateSample(f"target crosses the near plane at {pose!r}")

    light = rng.standard_normal(3)
    light /= np.linalg.norm(light)
    intensity = rng.uniform(*LIGHT_RANGE)
    height, width = camera.height_px, camera.width_px
    image = rng.uniform(0.0, BACKGROUND_MAX, size=(height, width))
    star_rows = rng.integers(0, height, size=N_STARS)
    star_cols = rng.integers(0, width, size=N_STARS)
    image[star_rows, star_cols] = rng.uniform(*STAR_RANGE, size=N_STARS)

    rasterizer = Rasterizer(camera)
    depth, owner = rasterizer.rasterize(p_cam, model.triangles)
    mask = owner >= 0
    if not mask.any():
        raise DegenerateSample(f"empty silhouette at {pose!r}")

    shade = np.empty(len(model.triangles))
    for t, tri in enumerate(model.triangles):
        a, b, c = p_cam[tri]
        normal = np.cross(b - a, c - a)
        norm = np.linalg.norm(normal)
        normal = normal / norm if norm > 0 else normal
        if np.dot(normal, a + b + c) > 0:
            normal = -normal  # face the camera
        shade[t] = AMBIENT + intensity * max(0.0, float(np.dot(normal, -light)))
    image[mask] = shade[owner[mask]]
    image = np.clip(image, 0.0, 1.0)

    kp_cam = to_camera(pose, model.keypoints)
    if np.any(kp_cam[:, 2] <= MIN_DEPTH):
        raise DegenerateSample(f"keypoint behind the camera at {pose!r}")
    keypoints_px = rasterizer.screen(kp_cam)
    surface = rasterizer.depth_at(p_cam, model.triangles, keypoints_px)
    unoccluded = surface >= kp_cam[:, 2] * (1.0 - 1e-6)
    visibility = camera.in_frame(keypoints_px) & unoccluded

    return SampleRecord(
        index=index,
        image=image,
        pose=pose,
        keypoints_px=keypoints_px,
        bbox=BBox.from_extent(*mask_extent(mask)),
        mask=mask,
        visibility=visibility,
    )
