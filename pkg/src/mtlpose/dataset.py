"""Dataset generation and loading.

On-disk layout of a dataset directory::

    manifest.json               versioned manifest (camera, model, splits, seed)
    samples/000000/image.mtlt   float64 H x W image
    samples/000000/mask.mtlt    uint8 H x W mask
    samples/000000/meta.json    pose, keypoints, bbox, visibility, payload checksums

Every ``.mtlt`` tensor file is::

    offset  size        field
    0       4           magic b"MTLT"
    4       1           format version, uint8 (1)
    5       1           dtype code, ASCII: "d" float64, "B" uint8
    6       1           ndim, uint8
    7       1           zero pad
    8       4 * ndim    shape, uint32 little-endian
    ...     remainder   row-major little-endian payload

JSON files are written with sorted keys, so a fixed seed regenerates a
byte-identical directory. Heatmaps are not stored; they are encoded from the
keypoints at load time with the manifest's sigma.
"""
from __future__ import annotations

from collections.abc import Iterator
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import hashlib
import json
import logging
import math
import os
from pathlib import Path
import shutil
import struct
import tempfile
from typing import Any

import numpy as np
from numpy.typing import NDArray

from .errors import CorruptDataset, DegenerateSample, GenerationError, InvalidConfig
from .geometry import BBox, CameraModel, Pose, to_camera
from . import heatmap
from .scene import MODEL_VERSION, N_KEYPOINTS, SampleRecord, TargetModel, build_target_model, render, sample_pose

logger = logging.getLogger("Dataset")

MAGIC = b"MTLT"
TENSOR_VERSION = 1
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.json"

_DTYPES = {"d": np.dtype("<f8"), "B": np.dtype("u1")}
_CODES = {np.dtype(np.float64): "d", np.dtype(np.uint8): "B"}
_HEADER = struct.Struct("<4sBcBx")

#: Pose redraws allowed per sample before generation gives up.
MAX_ATTEMPTS = 100


# Tensor codec

def encode_tensor(array: NDArray[Any]) -> bytes:
    code = _CODES.get(array.dtype)
    if code is None:
        raise InvalidConfig(f"unsupported tensor dtype {array.dtype}")
    shape = struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()
    return _HEADER.pack(MAGIC, TENSOR_VERSION, code.encode("ascii"), array.ndim) + shape + payload


def decode_tensor(data: bytes, name: str = "<bytes>") -> NDArray[Any]:
    if len(data) < _HEADER.size:
        raise CorruptDataset(name, f"tensor header truncated at {len(data)} bytes")
    magic, version, code, ndim = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptDataset(name, f"bad magic {magic!r}")
    if version != TENSOR_VERSION:
        raise CorruptDataset(name, f"tensor format version {version} is not {TENSOR_VERSION}")
    dtype = _DTYPES.get(code.decode("ascii", errors="replace"))
    if dtype is None:
        raise CorruptDataset(name, f"unknown dtype code {code!r}")
    offset = _HEADER.size + 4 * ndim
    if len(data) < offset:
        raise CorruptDataset(name, "shape header truncated")
    shape = struct.unpack_from(f"<{ndim}I", data, _HEADER.size)
    expected = math.prod(shape) * dtype.itemsize
    if len(data) - offset != expected:
        raise CorruptDataset(name, f"payload is {len(data) - offset} bytes, shape {shape} needs {expected}")
    return np.frombuffer(data, dtype=dtype, offset=offset).reshape(shape).copy()


def write_tensor(path: Path, array: NDArray[Any]) -> str:
    """Write one tensor file; returns the SHA-256 of its bytes."""
    data = encode_tensor(array)
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_tensor(path: Path) -> NDArray[Any]:
    return decode_tensor(path.read_bytes(), str(path))


def _json_bytes(document: Any) -> bytes:
    return (json.dumps(document, sort_keys=True, indent=1) + "\n").encode("utf-8")


# Configuration and manifest

@dataclass(frozen=True)
class SynthConfig:
    """Dataset generation settings; the defaults are the desk scale."""
    n: int = 2000
    seed: int = 0
    size: int = 64
    d_min: float = 1.0
    d_max: float = 25.0
    fov_deg: float = 35.0
    sigma_px: float | None = None
    workers: int = 1

    def __post_init__(self) -> None:
        if self.n < 1:
            raise InvalidConfig(f"dataset size must be at least 1, got {self.n}")
        if self.size < 8:
            raise InvalidConfig(f"image size must be at least 8 px, got {self.size}")
        if not 0 < self.d_min < self.d_max:
            raise InvalidConfig(f"distance range must satisfy 0 < d_min < d_max, got [{self.d_min}, {self.d_max}]")
        if not 0 < self.fov_deg < 180:
            raise InvalidConfig(f"field of view must be in (0, 180) degrees, got {self.fov_deg}")
        if self.sigma_px is not None and not self.sigma_px > 0:
            raise InvalidConfig(f"sigma_px must be positive, got {self.sigma_px}")

    @property
    def sigma(self) -> float:
        return self.sigma_px if self.sigma_px is not None else heatmap.default_sigma(self.size)

    def camera(self) -> CameraModel:
        return CameraModel.from_fov(
            self.size, self.size, self.fov_deg,
            focal_mm=39.47, pixel_pitch_um=5.86 * 1024 / self.size,
        )


def split_counts(n: int) -> dict[str, int]:
    """70/20/10 rounded half up; train takes the remainder."""
    val = math.floor(0.2 * n + 0.5)
    test = math.floor(0.1 * n + 0.5)
    return {"train": n - val - test, "val": val, "test": test}


def sample_id(index: int) -> str:
    return f"{index:06d}"


@dataclass(frozen=True)
class DatasetManifest:
    seed: int
    camera: CameraModel
    counts: dict[str, int]
    d_min: float
    d_max: float
    image_size: int
    sigma_px: float
    model: dict[str, Any]
    splits: dict[str, list[str]]
    version: int = MANIFEST_VERSION
    root: Path = field(default=Path("."), compare=False)

    @property
    def n(self) -> int:
        return sum(self.counts.values())

    def sample_dir(self, sample: str) -> Path:
        return self.root / "samples" / sample

    def files(self) -> Iterator[Path]:
        yield self.root / MANIFEST_NAME
        for split in SPLITS:
            for sample in self.splits[split]:
                for name in ("image.mtlt", "mask.mtlt", "meta.json"):
                    yield self.sample_dir(sample) / name

    def as_dict(self) -> dict[str, Any]:
        return {
            "version": self.version,
            "seed": self.seed,
            "camera": self.camera.as_dict(),
            "conventions": {
                "focal_length": "f_px = W / (2 tan(fov / 2)); focal_mm and pixel_pitch_um are metadata",
                "principal_point": "(W / 2, H / 2)",
                "quaternion": "scalar-first, Hamilton, camera-from-body",
                "pixel_center": "(u, v) = (col, row)",
            },
            "counts": self.counts,
            "distance_range_m": [self.d_min, self.d_max],
            "image_size": self.image_size,
            "sigma_px": self.sigma_px,
            "model": self.model,
            "splits": self.splits,
        }

    @classmethod
    def from_dict(cls, document: dict[str, Any], root: Path) -> "DatasetManifest":
        try:
            d_min, d_max = document["distance_range_m"]
            return cls(
                seed=int(document["seed"]),
                camera=CameraModel.from_dict(document["camera"]),
                counts={k: int(v) for k, v in document["counts"].items()},
                d_min=float(d_min),
                d_max=float(d_max),
                image_size=int(document["image_size"]),
                sigma_px=float(document["sigma_px"]),
                model=dict(document["model"]),
                splits={k: list(v) for k, v in document["splits"].items()},
                version=int(document["version"]),
                root=root,
            )
        except (KeyError, TypeError, ValueError) as ex:
            raise CorruptDataset(MANIFEST_NAME, f"malformed manifest: {ex!r}") from ex


# Generation

def generate_sample(config: SynthConfig, index: int, model: TargetModel | None = None) -> SampleRecord:
    """Sample ``index`` of a dataset; depends only on ``(config, index)``."""
    model = model or build_target_model()
    camera = config.camera()
    rng = np.random.default_rng(config.seed ^ index)
    for attempt in range(MAX_ATTEMPTS):
        pose = sample_pose(rng, config.d_min, config.d_max, camera)
        try:
            return render(camera, pose, model, rng, index)
        except DegenerateSample as ex:
            logger.debug("sample %d attempt %d redrawn: %s", index, attempt, ex)
    raise GenerationError(f"sample {index}: no renderable pose after {MAX_ATTEMPTS} attempts")


def _generate_one(args: tuple[SynthConfig, int]) -> SampleRecord:
    config, index = args
    return generate_sample(config, index)


def sample_meta(record: SampleRecord, split: str, checksums: dict[str, str]) -> dict[str, Any]:
    return {
        "index": record.index,
        "split": split,
        "pose": record.pose.as_dict(),
        "keypoints_px": record.keypoints_px.tolist(),
        "bbox": {"cx": record.bbox.cx, "cy": record.bbox.cy, "w": record.bbox.w, "h": record.bbox.h},
        "visibility": [bool(v) for v in record.visibility],
        "sha256": checksums,
    }


def _write_sample(root: Path, record: SampleRecord, split: str) -> None:
    directory = root / "samples" / sample_id(record.index)
    directory.mkdir(parents=True)
    checksums = {
        "image": write_tensor(directory / "image.mtlt", record.image),
        "mask": write_tensor(directory / "mask.mtlt", record.mask.astype(np.uint8)),
    }
    (directory / "meta.json").write_bytes(_json_bytes(sample_meta(record, split, checksums)))


def generate_dataset(config: SynthConfig, out: Path) -> DatasetManifest:
    """Render ``config.n`` samples into ``out``.

    The dataset is built in a temporary sibling directory which replaces
    ``out`` only when complete. An existing ``out`` must be empty or a
    previously generated dataset.
    """
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not (out / MANIFEST_NAME).exists():
        raise GenerationError(f"refusing to replace {out}: not empty and not a dataset")
    counts = split_counts(config.n)
    bounds = np.cumsum([0] + [counts[s] for s in SPLITS])
    splits = {s: [sample_id(i) for i in range(bounds[k], bounds[k + 1])] for k, s in enumerate(SPLITS)}
    split_of = {i: s for k, s in enumerate(SPLITS) for i in range(bounds[k], bounds[k + 1])}
    model = build_target_model()
    camera = config.camera()

    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        temp = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}-"))
    except OSError as ex:
        raise GenerationError(f"cannot create a working directory beside {out}: {ex.strerror}") from ex
    logger.info("Generating %d samples (%s) into %s", config.n, counts, out)
    try:
        jobs = [(config, i) for i in range(config.n)]
        if config.workers > 1:
            with ProcessPoolExecutor(max_workers=config.workers) as pool:
                records: Iterator[SampleRecord] = pool.map(_generate_one, jobs, chunksize=16)
                for record in records:
                    _write_sample(temp, record, split_of[record.index])
        else:
            for job in jobs:
                record = _generate_one(job)
                _write_sample(temp, record, split_of[record.index])
        manifest = DatasetManifest(
            seed=config.seed,
            camera=camera,
            counts=counts,
            d_min=config.d_min,
            d_max=config.d_max,
            image_size=config.size,
            sigma_px=config.sigma,
            model=model.as_dict(),
            splits=splits,
            root=out,
        )
        (temp / MANIFEST_NAME).write_bytes(_json_bytes(manifest.as_dict()))
        if out.exists():
            shutil.rmtree(out)
        os.replace(temp, out)
    except OSError as ex:
        shutil.rmtree(temp, ignore_errors=True)
        raise GenerationError(f"cannot write {ex.filename or out}: {ex.strerror}") from ex
    except BaseException:
        shutil.rmtree(temp, ignore_errors=True)
        raise
    logger.info("Wrote %d samples to %s", config.n, out)
    return manifest


# Loading

@dataclass(frozen=True, eq=False)
class LoadedDataset:
    manifest: DatasetManifest
    model: TargetModel
    splits: dict[str, list[SampleRecord]]

    @property
    def camera(self) -> CameraModel:
        return self.manifest.camera

    def __getitem__(self, split: str) -> list[SampleRecord]:
        return self.splits[split]

    def __iter__(self) -> Iterator[tuple[str, list[SampleRecord]]]:
        return iter(self.splits.items())

    def heatmaps(self, record: SampleRecord) -> heatmap.HeatmapStack:
        return record.heatmaps(self.manifest.sigma_px)


def read_manifest(path: Path) -> DatasetManifest:
    path = Path(path)
    manifest_path = path / MANIFEST_NAME if path.is_dir() else path
    try:
        document = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError as ex:
        raise CorruptDataset(MANIFEST_NAME, f"no manifest at {manifest_path}") from ex
    except json.JSONDecodeError as ex:
        raise CorruptDataset(MANIFEST_NAME, f"unreadable manifest: {ex}") from ex
    if document.get("version") != MANIFEST_VERSION:
        raise CorruptDataset(MANIFEST_NAME, f"manifest version {document.get('version')!r} is not {MANIFEST_VERSION}")
    return DatasetManifest.from_dict(document, manifest_path.parent)


def _check_manifest(manifest: DatasetManifest, model: TargetModel) -> None:
    keypoints = manifest.model.get("keypoints", [])
    if len(keypoints) != N_KEYPOINTS:
        raise CorruptDataset(MANIFEST_NAME, f"model has {len(keypoints)} keypoints; {N_KEYPOINTS} required")
    if manifest.model.get("version") != MODEL_VERSION:
        raise CorruptDataset(MANIFEST_NAME, f"model version {manifest.model.get('version')!r} is not {MODEL_VERSION}")
    if not np.allclose(np.asarray(keypoints, dtype=np.float64), model.keypoints, rtol=0.0, atol=1e-12):
        raise CorruptDataset(MANIFEST_NAME, "model keypoints differ from the built-in model")
    if set(manifest.splits) != set(SPLITS) or set(manifest.counts) != set(SPLITS):
        raise CorruptDataset(MANIFEST_NAME, f"splits must be {SPLITS}")
    if manifest.counts != split_counts(manifest.n):
        raise CorruptDataset(MANIFEST_NAME, f"counts {manifest.counts} are not a 70/20/10 split")
    for split in SPLITS:
        if len(manifest.splits[split]) != manifest.counts[split]:
            raise CorruptDataset(MANIFEST_NAME, f"split {split!r} lists {len(manifest.splits[split])} samples")
    size = manifest.image_size
    if (manifest.camera.width_px, manifest.camera.height_px) != (size, size):
        raise CorruptDataset(MANIFEST_NAME, f"camera {manifest.camera.width_px}x{manifest.camera.height_px} is not {size}x{size}")


def load_sample(manifest: DatasetManifest, model: TargetModel, sample: str) -> SampleRecord:
    directory = manifest.sample_dir(sample)
    try:
        meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
        raw = {name: (directory / f"{name}.mtlt").read_bytes() for name in ("image", "mask")}
    except OSError as ex:
        raise CorruptDataset(sample, f"cannot read {ex.filename}: {ex.strerror}") from ex
    except json.JSONDecodeError as ex:
        raise CorruptDataset(sample, f"unreadable metadata: {ex}") from ex
    for name, data in raw.items():
        if hashlib.sha256(data).hexdigest() != meta.get("sha256", {}).get(name):
            raise CorruptDataset(sample, f"{name} checksum mismatch")
    image = decode_tensor(raw["image"], f"{sample}/image")
    mask = decode_tensor(raw["mask"], f"{sample}/mask")
    if image.dtype != np.float64 or mask.dtype != np.uint8:
        raise CorruptDataset(sample, f"dtypes {image.dtype}/{mask.dtype} are not float64/uint8")
    if np.any(mask > 1):
        raise CorruptDataset(sample, "mask values outside {0, 1}")
    try:
        record = SampleRecord(
            index=int(meta["index"]),
            image=image,
            pose=Pose.from_dict(meta["pose"]),
            keypoints_px=np.asarray(meta["keypoints_px"], dtype=np.float64),
            bbox=BBox(**meta["bbox"]),
            mask=mask.astype(bool),
            visibility=np.asarray(meta["visibility"], dtype=bool),
        )
    except (KeyError, TypeError, ValueError) as ex:
        raise CorruptDataset(sample, f"malformed metadata: {ex!r}") from ex
    problems = record.problems(manifest.camera)
    if not problems:
        depth = to_camera(record.pose, model.keypoints)[:, 2]
        if np.any(depth[record.visibility] <= 0):
            problems.append("visible keypoint with non-positive depth")
    if problems:
        raise CorruptDataset(sample, "; ".join(problems))
    return record


def load_dataset(path: Path) -> LoadedDataset:
    """Read and validate a dataset directory (or its manifest file)."""
    manifest = read_manifest(path)
    model = build_target_model()
    _check_manifest(manifest, model)
    splits = {
        split: [load_sample(manifest, model, sample) for sample in manifest.splits[split]]
        for split in SPLITS
    }
    logger.info("Loaded %s from %s", {s: len(r) for s, r in splits.items()}, manifest.root)
    return LoadedDataset(manifest, model, splits)


# Batching

@dataclass(frozen=True, eq=False)
class Batch:
    """Stacked network inputs and targets for a list of records."""
    images: NDArray[np.float64]
    heatmaps: NDArray[np.float64]
    masks: NDArray[np.float64]
    boxes: NDArray[np.float64]
    poses: list[Pose]

    def __len__(self) -> int:
        return len(self.poses)


def make_batch(records: list[SampleRecord], sigma_px: float) -> Batch:
    height, width = records[0].image.shape
    return Batch(
        images=np.stack([r.image for r in records])[:, None],
        heatmaps=np.stack([heatmap.encode(r.keypoints_px, height, width, sigma_px).maps for r in records]),
        masks=np.stack([r.mask.astype(np.float64) for r in records])[:, None],
        boxes=np.stack([r.bbox.as_array() for r in records]),
        poses=[r.pose for r in records],
    )
